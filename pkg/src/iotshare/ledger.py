"""Hash-chained, key-value backed ledger that executes signed contract calls.

One :class:`Ledger` instance lives on each simulated peer. Transactions are
validated (signature, nonce, known function) before inclusion, executed
serially against the state left by the previous transaction, and recorded
together with their contract result. A contract call that fails is still
recorded but none of its writes are kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

from . import keys
from .encoding import ZERO_HASH, EncodingError, decode, digest_value, encode

logger = logging.getLogger(__name__)

NONCE_PREFIX = "nonce"


class LedgerError(Exception):
    code = "LedgerError"


class InvalidSignature(LedgerError):
    code = "InvalidSignature"


class StaleNonce(LedgerError):
    code = "StaleNonce"


class UnknownFunction(LedgerError):
    code = "UnknownFunction"


class ChainError(LedgerError):
    """A received block does not extend this ledger or disagrees with it."""

    code = "ChainError"


class ContractError(Exception):
    """Raised by contract code; becomes an error result, never propagates."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


# --------------------------------------------------------------------------
# Transactions and blocks
# --------------------------------------------------------------------------


def signing_payload(function: str, args: Any, nonce: int) -> bytes:
    return encode([function, args, nonce])


@dataclass(frozen=True)
class Transaction:
    invoker: str
    function: str
    args: Any
    nonce: int
    signature: bytes
    tx_id: bytes = field(default=b"", compare=False)

    def __post_init__(self) -> None:
        if not self.tx_id:
            object.__setattr__(self, "tx_id", self.compute_id())

    @classmethod
    def create(cls, identity: keys.Identity, function: str, args: Any, nonce: int) -> "Transaction":
        sig = identity.sign(signing_payload(function, args, nonce))
        return cls(identity.id, function, args, nonce, sig)

    def body(self) -> dict:
        return {
            "invoker": self.invoker,
            "function": self.function,
            "args": self.args,
            "nonce": self.nonce,
            "signature": self.signature,
        }

    def compute_id(self) -> bytes:
        return digest_value(self.body())

    def to_value(self) -> dict:
        return {**self.body(), "tx_id": self.tx_id}

    @classmethod
    def from_value(cls, value: Any) -> "Transaction":
        _expect_keys(value, {"invoker", "function", "args", "nonce", "signature", "tx_id"})
        _expect_type(value["invoker"], str)
        _expect_type(value["function"], str)
        _expect_type(value["nonce"], int)
        _expect_type(value["signature"], bytes)
        _expect_type(value["tx_id"], bytes)
        return cls(
            value["invoker"], value["function"], value["args"],
            value["nonce"], value["signature"], value["tx_id"],
        )

    def encoded_size(self) -> int:
        return len(encode(self.to_value()))


@dataclass
class Block:
    height: int
    prev_hash: bytes
    transactions: list[Transaction]
    results: list[dict]
    block_hash: bytes = b""

    def __post_init__(self) -> None:
        if not self.block_hash:
            self.block_hash = self.compute_hash()

    def compute_hash(self) -> bytes:
        # Results are hashed too so a recorded outcome cannot be rewritten.
        return digest_value({
            "height": self.height,
            "prev_hash": self.prev_hash,
            "tx_ids": [tx.tx_id for tx in self.transactions],
            "results": self.results,
        })

    def to_value(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "transactions": [tx.to_value() for tx in self.transactions],
            "results": self.results,
            "block_hash": self.block_hash,
        }

    def encode(self) -> bytes:
        return encode(self.to_value())

    @classmethod
    def from_value(cls, value: Any) -> "Block":
        _expect_keys(value, {"height", "prev_hash", "transactions", "results", "block_hash"})
        _expect_type(value["height"], int)
        _expect_type(value["prev_hash"], bytes)
        _expect_type(value["block_hash"], bytes)
        _expect_type(value["transactions"], list)
        _expect_type(value["results"], list)
        txs = [Transaction.from_value(v) for v in value["transactions"]]
        return cls(value["height"], value["prev_hash"], txs, value["results"], value["block_hash"])

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        return cls.from_value(decode(data))


def _expect_keys(value: Any, expected: set) -> None:
    if not isinstance(value, dict) or set(value) != expected:
        raise EncodingError(f"expected map with keys {sorted(expected)}")


def _expect_type(value: Any, kind: type) -> None:
    if type(value) is not kind:
        raise EncodingError(f"expected {kind.__name__}, got {type(value).__name__}")


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


class StateStore:
    """Committed key-value state: ``entries`` maps keys to canonical bytes."""

    def __init__(self, entries: Optional[dict[str, bytes]] = None, version: int = -1):
        self.entries: dict[str, bytes] = dict(entries or {})
        self.version = version

    def get(self, key: str) -> Any:
        raw = self.entries.get(key)
        return None if raw is None else decode(raw)

    def scan(self, prefix: str) -> Iterator[tuple[str, Any]]:
        for key in sorted(k for k in self.entries if k.startswith(prefix)):
            yield key, decode(self.entries[key])

    def copy(self) -> "StateStore":
        return StateStore(self.entries, self.version)

    def encode(self) -> bytes:
        return encode({"version": self.version, "entries": self.entries})

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StateStore) and self.encode() == other.encode()


class StateView:
    """Buffered writes layered over a store or another view."""

    def __init__(self, base: "StateStore | StateView"):
        self.base = base
        self.writes: dict[str, bytes] = {}

    def get_raw(self, key: str) -> Optional[bytes]:
        if key in self.writes:
            return self.writes[key]
        if isinstance(self.base, StateView):
            return self.base.get_raw(key)
        return self.base.entries.get(key)

    def get(self, key: str) -> Any:
        raw = self.get_raw(key)
        return None if raw is None else decode(raw)

    def set(self, key: str, value: Any) -> None:
        self.writes[key] = encode(value)

    def _keys(self) -> set[str]:
        base_keys = self.base._keys() if isinstance(self.base, StateView) else set(self.base.entries)
        return base_keys | set(self.writes)

    def scan(self, prefix: str) -> Iterator[tuple[str, Any]]:
        for key in sorted(k for k in self._keys() if k.startswith(prefix)):
            yield key, self.get(key)

    def commit(self) -> None:
        if isinstance(self.base, StateView):
            self.base.writes.update(self.writes)
        else:
            self.base.entries.update(self.writes)
        self.writes = {}


@dataclass
class Context:
    """What a contract function sees of the transaction invoking it."""

    invoker: str
    tx_id: bytes
    height: int
    state: StateView


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------


def _default_contract():
    from . import contract
    return contract


def last_nonce(state: "StateStore | StateView", invoker: str) -> int:
    return state.get(NONCE_PREFIX + invoker) or 0


def validate(state: "StateStore | StateView", tx: Transaction, contract=None) -> None:
    """Raise unless ``tx`` may be included on top of ``state``."""
    contract = contract or _default_contract()
    if tx.function not in contract.FUNCTIONS:
        raise UnknownFunction(tx.function)
    if tx.tx_id != tx.compute_id():
        raise InvalidSignature("transaction id does not match contents")
    pk = contract.signer_key(state, tx)
    if pk is None or not keys.verify(pk, signing_payload(tx.function, tx.args, tx.nonce), tx.signature):
        raise InvalidSignature(f"bad signature from {tx.invoker!r}")
    if tx.nonce <= last_nonce(state, tx.invoker):
        raise StaleNonce(f"nonce {tx.nonce} from {tx.invoker!r} already used")


def _execute(view: StateView, tx: Transaction, height: int, contract) -> tuple[dict[str, bytes], dict]:
    fn = contract.FUNCTIONS[tx.function]
    tx_view = StateView(view)
    try:
        value = fn(Context(tx.invoker, tx.tx_id, height, tx_view), tx.args)
        result = {"ok": True, "value": value}
    except ContractError as exc:
        result = {"ok": False, "error": exc.code, "message": exc.message}
        tx_view.writes = {}
    except (KeyError, TypeError, ValueError, AttributeError, EncodingError) as exc:
        # Malformed arguments must fail the call, identically on every peer.
        result = {"ok": False, "error": "BadArguments", "message": type(exc).__name__}
        tx_view.writes = {}
    delta = dict(tx_view.writes)
    tx_view.commit()
    view.set(NONCE_PREFIX + tx.invoker, tx.nonce)
    return delta, result


def apply_transaction(state: StateStore, tx: Transaction, height: Optional[int] = None,
                      contract=None) -> tuple[dict[str, bytes], dict]:
    """Validate and execute ``tx`` on top of ``state`` without mutating it.

    Returns the contract's writes and its result. Failed calls return an
    empty delta.
    """
    contract = contract or _default_contract()
    validate(state, tx, contract)
    view = StateView(state)
    return _execute(view, tx, state.version + 1 if height is None else height, contract)


class Ledger:
    """A chain of blocks plus the state obtained by executing them."""

    def __init__(self, genesis_txs: Sequence[Transaction] = (), contract=None, genesis: Optional[Block] = None):
        self.contract = contract or _default_contract()
        self.blocks: list[Block] = []
        self.state = StateStore()
        self.applied_tx_ids: list[bytes] = []
        if genesis is not None:
            self.apply_block(genesis)
        else:
            self._build_block(list(genesis_txs), allow_empty=True)

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def validate(self, tx: Transaction, state: "StateStore | StateView | None" = None) -> None:
        validate(self.state if state is None else state, tx, self.contract)

    def execute(self, view: StateView, tx: Transaction) -> dict:
        """Validate and run ``tx`` into ``view`` as if in the next block."""
        self.validate(tx, view)
        return _execute(view, tx, self.height + 1, self.contract)[1]

    def append_block(self, txs: Sequence[Transaction]) -> Block:
        """Build, apply and return the next block. All-or-nothing."""
        if not txs:
            raise ValueError("a block needs at least one transaction")
        return self._build_block(list(txs))

    def _build_block(self, txs: list[Transaction], allow_empty: bool = False) -> Block:
        view = StateView(self.state)
        height = self.height + 1
        results = []
        for tx in txs:
            validate(view, tx, self.contract)
            results.append(_execute(view, tx, height, self.contract)[1])
        prev = self.head.block_hash if self.blocks else ZERO_HASH
        block = Block(height, prev, txs, results)
        self._commit(view, block)
        return block

    def apply_block(self, block: Block) -> list[dict]:
        """Apply a block produced elsewhere, re-executing every transaction.

        Raises :class:`ChainError` if the block does not link, its hash is
        wrong, or re-execution disagrees with the recorded results.
        """
        expected_prev = self.head.block_hash if self.blocks else ZERO_HASH
        if block.height != self.height + 1 or block.prev_hash != expected_prev:
            raise ChainError(f"block {block.height} does not extend height {self.height}")
        if block.block_hash != block.compute_hash():
            raise ChainError(f"block {block.height} hash mismatch")
        if len(block.results) != len(block.transactions):
            raise ChainError(f"block {block.height} results/transactions length mismatch")
        view = StateView(self.state)
        results = []
        for tx in block.transactions:
            validate(view, tx, self.contract)
            results.append(_execute(view, tx, block.height, self.contract)[1])
        if encode(results) != encode(block.results):
            raise ChainError(f"block {block.height} results diverge on re-execution")
        self._commit(view, block)
        return results

    def _commit(self, view: StateView, block: Block) -> None:
        view.commit()
        self.state.version = block.height
        self.blocks.append(block)
        self.applied_tx_ids.extend(tx.tx_id for tx in block.transactions)

    def get(self, key: str) -> Any:
        return self.state.get(key)

    def receipt_for(self, tx_id: bytes) -> Optional[tuple[int, dict]]:
        for block in reversed(self.blocks):
            for tx, result in zip(block.transactions, block.results):
                if tx.tx_id == tx_id:
                    return block.height, result
        return None


def replay(blocks: Iterable[Block], contract=None, upto: Optional[int] = None) -> Ledger:
    """Rebuild a ledger from its blocks alone, optionally stopping at ``upto``."""
    blocks = list(blocks)
    if upto is not None:
        blocks = blocks[: upto + 1]
    ledger = Ledger(contract=contract, genesis=blocks[0])
    for block in blocks[1:]:
        ledger.apply_block(block)
    return ledger


# --------------------------------------------------------------------------
# Verification and export
# --------------------------------------------------------------------------


@dataclass
class ChainReport:
    ok: bool
    bad_height: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(blocks: Sequence[Block]) -> ChainReport:
    if not blocks:
        raise ValueError("cannot verify an empty chain")
    prev = ZERO_HASH
    for index, block in enumerate(blocks):
        if block.height != index:
            return ChainReport(False, index, "height out of sequence")
        if block.prev_hash != prev:
            return ChainReport(False, index, "previous-hash link broken")
        for tx in block.transactions:
            if tx.tx_id != tx.compute_id():
                return ChainReport(False, index, "transaction id mismatch")
        if len(block.results) != len(block.transactions):
            return ChainReport(False, index, "result count mismatch")
        if block.block_hash != block.compute_hash():
            return ChainReport(False, index, "block hash mismatch")
        prev = block.block_hash
    return ChainReport(True)


def verify_encoded_chain(encoded: Sequence[bytes]) -> ChainReport:
    """Decode then verify; an undecodable block is a failure at its index."""
    blocks = []
    for index, data in enumerate(encoded):
        try:
            block = Block.decode(data)
        except (EncodingError, ValueError) as exc:
            return ChainReport(False, index, f"undecodable block: {exc}")
        if encode(block.to_value()) != bytes(data):
            return ChainReport(False, index, "non-canonical block encoding")
        blocks.append(block)
    return verify_chain(blocks)


def export_chain(blocks: Iterable[Block], path: Path) -> None:
    with open(path, "w") as fh:
        for block in blocks:
            fh.write(block.encode().hex() + "\n")


def read_chain_lines(path: Path) -> list[bytes]:
    return [bytes.fromhex(line) for line in Path(path).read_text().splitlines() if line.strip()]


def import_chain(path: Path) -> list[Block]:
    return [Block.decode(data) for data in read_chain_lines(path)]
