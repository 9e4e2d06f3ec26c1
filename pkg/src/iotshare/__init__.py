"""Blockchain-backed IoT data sharing: a replicated marketplace ledger, an
ACL-enforcing storage node, prefix encryption with ledger-gated key
distribution, and a latency benchmark."""
from __future__ import annotations

from .domain import Client, Domain, DomainError
from .keys import Identity
from .ledger import Block, ContractError, Ledger, Transaction, verify_chain
from .network import Network, NetworkConfig

__all__ = ["Block", "Client", "ContractError", "Domain", "DomainError", "Identity", "Ledger",
           "Network", "NetworkConfig", "Transaction", "verify_chain"]
__version__ = "0.1.0"
