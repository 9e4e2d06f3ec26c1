"""Simulated permissioned network: one ordering service, N replicating peers.

Clients hand transactions to the API peer, which forwards them to the
orderer. The orderer is a single sequencer: it validates each transaction
against its own replica, batches valid ones into blocks (16 transactions or
a timer, whichever comes first) and pushes every block to every peer over a
star topology. Peers apply blocks in order on their own threads.

Links can delay traffic by a base latency plus a per-byte cost, with seeded
uniform jitter of +/-``jitter`` on the base part. Every link owns its own
RNG, so the delay sequence on a link does not depend on thread timing.
"""
from __future__ import annotations

import logging
import queue
import random
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from . import contract
from .ledger import Block, Ledger, LedgerError, StateView, Transaction, replay

logger = logging.getLogger(__name__)


class NetworkStopped(Exception):
    code = "NetworkStopped"


class UnknownPeer(KeyError):
    code = "UnknownPeer"


class TransactionRejected(Exception):
    """The orderer refused a transaction before inclusion."""

    def __init__(self, cause: LedgerError):
        super().__init__(str(cause))
        self.cause = cause
        self.code = cause.code


@dataclass
class NetworkConfig:
    peer_count: int = 5
    base_ms: float = 0.0
    per_byte_ms: float = 0.0
    jitter: float = 0.1
    seed: int = 0
    batch_size: int = 16
    batch_timeout_ms: float = 100.0
    api_peer: int = 0
    storage_peer: int = -1

    def __post_init__(self) -> None:
        if self.peer_count < 1:
            raise ValueError("peer_count must be >= 1")
        if self.base_ms < 0 or self.per_byte_ms < 0 or self.batch_timeout_ms < 0:
            raise ValueError("delays must be >= 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.api_peer %= self.peer_count
        self.storage_peer %= self.peer_count

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "NetworkConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, Any] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
            values[key] = float(raw) if types[key] == "float" else int(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def with_overrides(self, **overrides) -> "NetworkConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


class Link:
    """One directed simulated link with its own seeded jitter source."""

    def __init__(self, name: str, config: NetworkConfig):
        self.name = name
        self.base_ms = config.base_ms
        self.per_byte_ms = config.per_byte_ms
        self.jitter = config.jitter
        self._rng = random.Random(f"{config.seed}:{name}")
        self._lock = threading.Lock()

    def delay_ms(self, nbytes: int) -> float:
        with self._lock:
            wobble = self._rng.uniform(-self.jitter, self.jitter)
        return self.base_ms * (1 + wobble) + self.per_byte_ms * nbytes

    def transmit(self, nbytes: int) -> float:
        ms = self.delay_ms(nbytes)
        if ms > 0:
            time.sleep(ms / 1000)
        return ms


@dataclass
class Receipt:
    tx_id: bytes
    height: int
    result: dict
    elapsed_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return bool(self.result.get("ok"))

    @property
    def error(self) -> Optional[str]:
        return None if self.ok else self.result.get("error")

    @property
    def value(self) -> Any:
        return self.result.get("value")


class PeerNode:
    def __init__(self, peer_id: str, chain: Sequence[Block], link: Link, network: "Network",
                 is_api_node: bool = False, is_storage_node: bool = False):
        self.peer_id = peer_id
        self.ledger = replay(chain)
        self.link = link
        self.is_api_node = is_api_node
        self.is_storage_node = is_storage_node
        self.inbox: "queue.Queue[Optional[tuple[Block, int]]]" = queue.Queue()
        self.lock = threading.RLock()
        self.applied = threading.Condition(self.lock)
        self.fault: Optional[Exception] = None
        self._network = network
        self._thread = threading.Thread(target=self._run, name=f"peer-{peer_id}", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self.inbox.put(None)
        self._thread.join(timeout=5)

    def _run(self) -> None:
        while True:
            item = self.inbox.get()
            if item is None:
                return
            block, size = item
            self.link.transmit(size)
            try:
                with self.lock:
                    results = self.ledger.apply_block(block)
                    self.applied.notify_all()
            except LedgerError as exc:
                logger.error("peer %s rejected block %d: %s", self.peer_id, block.height, exc)
                self.fault = exc
                return
            if self.is_api_node:
                self._network._resolve(block, results)

    @property
    def height(self) -> int:
        with self.lock:
            return self.ledger.height

    def get(self, key: str) -> Any:
        with self.lock:
            return self.ledger.get(key)

    def call(self, function: str, args: Optional[dict] = None) -> Any:
        with self.lock:
            return contract.query(self.ledger.state, function, args)

    def wait_for_height(self, height: int, timeout: float = 30.0) -> bool:
        with self.lock:
            return self.applied.wait_for(lambda: self.ledger.height >= height, timeout)

    def blocks(self, start: int = 0, stop: Optional[int] = None) -> list[Block]:
        with self.lock:
            return list(self.ledger.blocks[start:stop])

    def state_bytes(self) -> bytes:
        with self.lock:
            return self.ledger.state.encode()

    def chain_bytes(self) -> list[bytes]:
        with self.lock:
            return [b.encode() for b in self.ledger.blocks]


class Network:
    """Orderer plus peers. Use as a context manager or call start/stop."""

    def __init__(self, config: Optional[NetworkConfig] = None, genesis_txs: Sequence[Transaction] = (),
                 chain: Optional[Sequence[Block]] = None):
        """Start from ``genesis_txs``, or resume from an existing ``chain``."""
        self.config = config or NetworkConfig()
        self._links: dict[str, Link] = {}
        self._links_lock = threading.Lock()
        self.orderer_ledger = replay(chain) if chain else Ledger(genesis_txs)
        blocks = self.orderer_ledger.blocks
        self.peers: dict[str, PeerNode] = {}
        for i in range(self.config.peer_count):
            pid = f"peer{i}"
            self.peers[pid] = PeerNode(
                pid, blocks, self.link(f"orderer->{pid}"), self,
                is_api_node=(i == self.config.api_peer),
                is_storage_node=(i == self.config.storage_peer),
            )
        self.api_peer = self.peers[f"peer{self.config.api_peer}"]
        self.storage_peer = self.peers[f"peer{self.config.storage_peer}"]
        self._queue: "queue.Queue[Optional[tuple[Transaction, Future, float]]]" = queue.Queue()
        self._pending: dict[bytes, tuple[Future, float]] = {}
        self._pending_lock = threading.Lock()
        self._resume = threading.Event()
        self._resume.set()
        self._running = False
        self._stopped = False
        self._cutting = threading.Event()
        self._orderer = threading.Thread(target=self._order_loop, name="orderer", daemon=True)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Network":
        for peer in self.peers.values():
            peer.start()
        self._running = True
        self._orderer.start()
        return self

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self._resume.set()
        self._queue.put(None)
        if self._running:
            self._orderer.join(timeout=10)
        for peer in self.peers.values():
            peer.stop()
        with self._pending_lock:
            for fut, _ in self._pending.values():
                if not fut.done():
                    fut.set_exception(NetworkStopped("network stopped"))
            self._pending.clear()

    def __enter__(self) -> "Network":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def link(self, name: str) -> Link:
        with self._links_lock:
            if name not in self._links:
                self._links[name] = Link(name, self.config)
            return self._links[name]

    # -- client side -------------------------------------------------------

    def submit_async(self, tx: Transaction) -> Future:
        if self._stopped or not self._running:
            raise NetworkStopped("network is not running")
        t0 = time.perf_counter()
        size = tx.encoded_size()
        self.link("client->api").transmit(size)
        self.link("api->orderer").transmit(size)
        fut: Future = Future()
        self._queue.put((tx, fut, t0))
        return fut

    def submit(self, tx: Transaction, timeout: float = 60.0) -> Receipt:
        """Order, commit and apply ``tx``; the receipt comes from the API peer."""
        return self.submit_async(tx).result(timeout)

    def peer(self, peer_id: "str | int") -> PeerNode:
        if isinstance(peer_id, int):
            peer_id = f"peer{peer_id}"
        try:
            return self.peers[peer_id]
        except KeyError:
            raise UnknownPeer(peer_id) from None

    def query(self, peer_id: "str | int", key: str) -> Any:
        """Committed value of ``key`` on one peer, or ``None``."""
        return self.peer(peer_id).get(key)

    def call(self, function: str, args: Optional[dict] = None, peer_id: "str | int | None" = None) -> Any:
        peer = self.api_peer if peer_id is None else self.peer(peer_id)
        return peer.call(function, args)

    @property
    def height(self) -> int:
        return self.orderer_ledger.height

    def pause(self) -> None:
        """Hold block cutting; submitted transactions wait in the orderer."""
        self._resume.clear()

    def resume(self) -> None:
        self._resume.set()

    def wait_quiescent(self, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self._queue.empty() and not self._cutting.is_set():
                target = self.orderer_ledger.height
                if all(p.height >= target for p in self.peers.values()):
                    if self._queue.empty() and not self._cutting.is_set() and target == self.orderer_ledger.height:
                        return
            time.sleep(0.001)
        raise TimeoutError("network did not quiesce")

    # -- orderer -----------------------------------------------------------

    def _order_loop(self) -> None:
        timeout_s = self.config.batch_timeout_ms / 1000
        while True:
            item = self._queue.get()
            if item is None:
                return
            self._cutting.set()
            batch = [item]
            deadline = time.monotonic() + timeout_s
            stop = False
            while len(batch) < self.config.batch_size:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    nxt = self._queue.get(timeout=remaining)
                except queue.Empty:
                    break
                if nxt is None:
                    stop = True
                    break
                batch.append(nxt)
            self._resume.wait()
            self._cut_block(batch)
            self._cutting.clear()
            if stop or self._stopped:
                return

    def _cut_block(self, batch: list) -> None:
        view = StateView(self.orderer_ledger.state)
        accepted = []
        for tx, fut, t0 in batch:
            try:
                self.orderer_ledger.execute(view, tx)
            except LedgerError as exc:
                fut.set_exception(TransactionRejected(exc))
                continue
            accepted.append(tx)
            with self._pending_lock:
                self._pending[tx.tx_id] = (fut, t0)
        if not accepted:
            return
        block = self.orderer_ledger.append_block(accepted)
        size = len(block.encode())
        for peer in self.peers.values():
            peer.inbox.put((block, size))

    def _resolve(self, block: Block, results: list[dict]) -> None:
        now = time.perf_counter()
        for tx, result in zip(block.transactions, results):
            with self._pending_lock:
                entry = self._pending.pop(tx.tx_id, None)
            if entry is not None:
                fut, t0 = entry
                fut.set_result(Receipt(tx.tx_id, block.height, result, (now - t0) * 1000))
