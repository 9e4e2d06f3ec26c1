"""Key authority: hands out prefix keys to identities the ledger ACL allows.

The authority keeps its own replica of the chain, advanced only by explicit
:meth:`KeyAuthority.sync_to_ledger` calls, and decides every request against
that replica. A metadata item registered with ``sharing_prefix = P``
authorizes everyone on its ACL to obtain keys for ``P`` and anything below
``P``. Granted keys are sealed to the requestor's registered Ed25519 key
(converted to X25519) so only the requestor can open them.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from nacl.public import PrivateKey, PublicKey, SealedBox
from nacl.signing import VerifyKey

from . import contract, keys, prefix
from .encoding import decode, encode
from .keys import Identity
from .ledger import Block, Ledger
from .network import Network
from .prefix import MalformedIdentity, MasterKeyPair, PrefixIdentity, PrefixKey

logger = logging.getLogger(__name__)


class AuthorityError(Exception):
    code = "AuthorityError"


class Denied(AuthorityError):
    code = "Denied"


class UnknownPrefix(AuthorityError):
    code = "UnknownPrefix"


class StaleSync(AuthorityError):
    code = "StaleSync"


class UnreachablePeer(AuthorityError):
    code = "UnreachablePeer"


def request_statement(requestor: str, prefix_text: str, nonce: bytes) -> list:
    return ["key-request", requestor, prefix_text, nonce]


@dataclass
class KeyRequest:
    requestor: str
    requestor_pk: bytes
    prefix: str
    nonce: bytes
    signature: bytes
    min_height: int = 0

    @classmethod
    def create(cls, identity: Identity, prefix_text: str, min_height: int = 0) -> "KeyRequest":
        nonce = os.urandom(16)
        sig = identity.sign_value(request_statement(identity.id, str(prefix_text), nonce))
        return cls(identity.id, identity.public_key, str(prefix_text), nonce, sig, min_height)


@dataclass
class WrappedKeyResponse:
    prefix: str
    wrapped_key: bytes
    grant_tx_ref: bytes
    height: int


def _curve_public(ed_pk: bytes) -> PublicKey:
    return VerifyKey(ed_pk).to_curve25519_public_key()


def wrap_key(key: PrefixKey, requestor_pk: bytes) -> bytes:
    plain = encode({"identity": str(key.identity), "key_material": key.key_material, "mpk": key.mpk})
    return SealedBox(_curve_public(requestor_pk)).encrypt(plain)


def unwrap_key(response: WrappedKeyResponse, identity: Identity) -> PrefixKey:
    """Open a granted key with the requestor's own signing key."""
    private: PrivateKey = identity.signing_key.to_curve25519_private_key()
    value = decode(SealedBox(private).decrypt(response.wrapped_key))
    return PrefixKey(PrefixIdentity.parse(value["identity"]), value["key_material"], value["mpk"])


class KeyAuthority:
    def __init__(self, network: Network, peer_id: "str | int | None" = None,
                 log_path: Optional[Path] = None):
        self.network = network
        self.peer = network.api_peer if peer_id is None else network.peer(peer_id)
        self.replica = Ledger(genesis=self.peer.blocks(0, 1)[0])
        self.log: list[dict] = []
        self.log_path = Path(log_path) if log_path is not None else None
        self._masters: dict[str, MasterKeyPair] = {}
        # (file_id, identity) -> id of the committed tx that put identity on the ACL
        self._acl_grants: dict[tuple[bytes, str], bytes] = {}
        self._lock = threading.RLock()

    @property
    def height(self) -> int:
        return self.replica.height

    def enroll(self, namespace: str, master: MasterKeyPair) -> None:
        """Accept custody of the master secret for ``namespace`` (a root label)."""
        PrefixIdentity.parse(namespace)
        with self._lock:
            self._masters[namespace] = master

    def sync_to_ledger(self, target_height: Optional[int] = None, timeout: float = 30.0) -> dict:
        with self._lock:
            start = self.height
            if target_height is None:
                target_height = self.peer.height
            if target_height > self.peer.height and not self.peer.wait_for_height(target_height, timeout):
                raise UnreachablePeer(f"peer {self.peer.peer_id} never reached height {target_height}")
            for block in self.peer.blocks(self.height + 1, target_height + 1):
                self.replica.apply_block(block)
                self._index(block)
            return {"from": start, "to": self.height, "applied": self.height - start}

    def _index(self, block: Block) -> None:
        for tx, result in zip(block.transactions, block.results):
            if not result["ok"]:
                continue
            if tx.function == "acceptOffer":
                self._acl_grants[(tx.args["file_id"], tx.invoker)] = tx.tx_id
            elif tx.function == "addData":
                self._acl_grants[(tx.args["mdata"]["file_id"], tx.invoker)] = tx.tx_id

    def request_key(self, req: KeyRequest) -> WrappedKeyResponse:
        with self._lock:
            try:
                response, file_id = self._decide(req)
            except AuthorityError as exc:
                self._record(req, exc.code, None, None)
                raise
            self._record(req, "grant", file_id, response.grant_tx_ref)
            return response

    def _decide(self, req: KeyRequest) -> tuple[WrappedKeyResponse, bytes]:
        try:
            wanted = PrefixIdentity.parse(req.prefix)
        except MalformedIdentity as exc:
            raise UnknownPrefix(str(exc)) from None
        if req.min_height > self.height:
            raise StaleSync(f"synced to {self.height}, request needs {req.min_height}")
        state = self.replica.state
        user = contract.get_user(state, req.requestor)
        if (user is None or user["pk"] != req.requestor_pk
                or not keys.verify_value(req.requestor_pk,
                                         request_statement(req.requestor, req.prefix, req.nonce),
                                         req.signature)):
            raise Denied(f"request not authenticated for {req.requestor!r}")

        master = self._masters.get(wanted.root)
        shared = [(PrefixIdentity.parse(m["sharing_prefix"]), m) for m in contract.list_data(state)
                  if m["sharing_prefix"] is not None]
        candidates = [m for p, m in shared if p.is_prefix_of(wanted)]
        if master is None or not candidates:
            # Asking above a shared prefix is a refusal, not an unknown name.
            if master is not None and any(wanted.is_prefix_of(p) for p, _ in shared):
                raise Denied(f"no authorization covers {wanted}")
            raise UnknownPrefix(f"no registered data is shared under {wanted}")
        for mdata in candidates:
            if req.requestor in mdata["acl"]:
                key = prefix.extract(master.msk, wanted)
                response = WrappedKeyResponse(
                    str(wanted), wrap_key(key, req.requestor_pk),
                    self._acl_grants[(mdata["file_id"], req.requestor)], self.height)
                return response, mdata["file_id"]
        raise Denied(f"{req.requestor!r} is not authorized for {wanted}")

    def _record(self, req: KeyRequest, decision: str, file_id: Optional[bytes], grant: Optional[bytes]) -> None:
        entry = {"requestor": req.requestor, "prefix": req.prefix, "decision": decision,
                 "height": self.height, "timestamp": time.time(),
                 "file_id": file_id.hex() if file_id else None,
                 "grant_tx": grant.hex() if grant else None}
        self.log.append(entry)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
