"""Commit/fetch latency benchmark for both sharing schemes.

One cell is (scheme, size, depth). Every cell gets a fresh domain; inside a
cell the operations run sequentially. "commit" covers everything the owner
and buyer do before the data is usable (upload, addData, createOffer,
acceptOffer, and for the prefix scheme the encryption and the key request);
"fetch" is the download, plus decryption for the prefix scheme.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO

from .domain import Domain, file_id_of
from .network import NetworkConfig

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("scheme", "size_mb", "depth", "op", "mean_ms", "stddev_ms", "reps")
SCHEMES = ("acl", "prefix")
LARGE_SIZES_MB = (1.0, 5.0, 10.0, 20.0)
DESK_SIZES_MB = (0.1, 0.5, 1.0, 2.0)
DEFAULT_DEPTHS = (1, 2, 3, 4, 5, 6)
BYTES_PER_MB = 1_000_000

R2_THRESHOLD = 0.9
DEPTH_SPREAD = 0.10


def bench_network_config(seed: int = 0) -> NetworkConfig:
    """Latency model used by default: LAN-ish links and a short batch timer."""
    return NetworkConfig(peer_count=5, base_ms=2.0, per_byte_ms=0.0001, jitter=0.1, seed=seed,
                         batch_size=16, batch_timeout_ms=25.0)


@dataclass
class BenchConfig:
    sizes_mb: Sequence[float] = DESK_SIZES_MB
    depths: Sequence[int] = DEFAULT_DEPTHS
    reps: int = 5
    schemes: Sequence[str] = SCHEMES
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sizes_mb or any(s <= 0 for s in self.sizes_mb):
            raise ValueError("sizes must be positive")
        if self.reps < 5:
            raise ValueError("reps must be >= 5")
        if any(not 1 <= d <= 6 for d in self.depths):
            raise ValueError("depths must lie in 1..6")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")

    def cells(self) -> list[tuple[str, float, int]]:
        out = []
        for scheme in self.schemes:
            depths = self.depths if scheme == "prefix" else (0,)
            out.extend((scheme, size, depth) for size in self.sizes_mb for depth in depths)
        return out


@dataclass
class BenchRow:
    scheme: str
    size_mb: float
    depth: int
    op: str
    mean_ms: float
    stddev_ms: float
    reps: int


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def payload_for(seed: int, size_mb: float, rep: int) -> bytes:
    return random.Random(f"{seed}:{size_mb}:{rep}").randbytes(int(size_mb * BYTES_PER_MB))


def device_identity(owner: str, depth: int) -> str:
    return "/".join([owner] + [f"d{i}" for i in range(1, depth)])


def _run_cell(scheme: str, size_mb: float, depth: int, reps: int, seed: int,
              network: NetworkConfig) -> dict[str, list[float]]:
    times: dict[str, list[float]] = {"commit": [], "fetch": []}
    with Domain(network) as domain:
        alice = domain.register("alice")
        bob = domain.register("bob")
        ident = device_identity("alice", depth) if scheme == "prefix" else None
        if scheme == "prefix":
            alice.setup_namespace(domain.authority)
        # rep -1 warms the cell up (first sync, allocator, caches) and is not recorded
        for rep in range(-1, reps):
            payload = payload_for(seed, size_mb, rep)
            uri = f"bench/{scheme}/{depth}/{rep}"

            t0 = time.perf_counter()
            if scheme == "prefix":
                att = alice.encrypt_upload(uri, ident, payload)
            else:
                att = alice.upload(uri, payload)
            file_id = att["file_id"]
            alice.add_data(file_id, [uri], sharing_prefix=ident)
            alice.create_offer(file_id, 100)
            bob.accept_offer(file_id)
            if scheme == "prefix":
                bob.request_key(ident)
            t1 = time.perf_counter()
            got = bob.fetch_decrypt(uri) if scheme == "prefix" else bob.fetch(uri)
            t2 = time.perf_counter()

            if got != payload:
                raise RuntimeError(f"fetched bytes differ for {uri}")
            if scheme == "acl" and file_id != file_id_of(payload):
                raise RuntimeError(f"attested file id differs for {uri}")
            if rep >= 0:
                times["commit"].append((t1 - t0) * 1000)
                times["fetch"].append((t2 - t1) * 1000)
    return times


def run_bench(cfg: BenchConfig, network: Optional[NetworkConfig] = None, progress=None) -> BenchResult:
    network = network or bench_network_config(cfg.seed)
    result = BenchResult()
    for scheme, size, depth in cfg.cells():
        try:
            times = _run_cell(scheme, size, depth, cfg.reps, cfg.seed, network)
        except Exception as exc:
            logger.error("cell %s/%s/%s failed: %s", scheme, size, depth, exc)
            result.failures.append({"scheme": scheme, "size_mb": size, "depth": depth, "error": repr(exc)})
            continue
        for op in ("commit", "fetch"):
            xs = times[op]
            row = BenchRow(scheme, size, depth, op, statistics.fmean(xs), statistics.stdev(xs), len(xs))
            result.rows.append(row)
            if progress is not None:
                progress(row)
    return result


# -- report ------------------------------------------------------------------

def write_csv(rows: Iterable[BenchRow], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.scheme, f"{r.size_mb:g}", r.depth, r.op, f"{r.mean_ms:.3f}", f"{r.stddev_ms:.3f}", r.reps])


def read_csv(text: str) -> list[BenchRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [BenchRow(r["scheme"], float(r["size_mb"]), int(r["depth"]), r["op"],
                     float(r["mean_ms"]), float(r["stddev_ms"]), int(r["reps"])) for r in reader]


def r_squared(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, intercept = statistics.linear_regression(xs, ys)
    mean_y = statistics.fmean(ys)
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def summarize(rows: Sequence[BenchRow], failures: Sequence[dict] = ()) -> list[Check]:
    """The three relational checks, computed from the table alone."""
    by_key = {(r.scheme, r.size_mb, r.depth, r.op): r.mean_ms for r in rows}
    cells = sorted({(r.scheme, r.size_mb, r.depth) for r in rows})

    slow = [c for c in cells if (c + ("commit",)) in by_key and (c + ("fetch",)) in by_key
            and not by_key[c + ("commit",)] > by_key[c + ("fetch",)]]
    checks = [Check("commit_slower_than_fetch", not slow and bool(cells) and not failures,
                    f"{len(cells) - len(slow)}/{len(cells)} cells" + (f", violations {slow}" if slow else ""))]

    fits = []
    for scheme, op in itertools.product(SCHEMES, ("commit", "fetch")):
        pts = [(r.size_mb, r.mean_ms) for r in rows if r.scheme == scheme and r.op == op]
        if len({x for x, _ in pts}) >= 2:
            fits.append((scheme, op, r_squared([x for x, _ in pts], [y for _, y in pts])))
    checks.append(Check("linear_in_size", bool(fits) and all(r2 >= R2_THRESHOLD for *_, r2 in fits),
                        ", ".join(f"{s}/{o} R2={r2:.4f}" for s, o, r2 in fits) or "not enough sizes"))

    spreads = []
    for size, op in sorted({(r.size_mb, r.op) for r in rows if r.scheme == "prefix"}):
        means = [r.mean_ms for r in rows if r.scheme == "prefix" and r.size_mb == size and r.op == op]
        if len(means) >= 2:
            spreads.append((size, op, max(means) / min(means) - 1.0))
    checks.append(Check("depth_insensitive", bool(spreads) and all(s < DEPTH_SPREAD for *_, s in spreads),
                        ", ".join(f"{size:g}MB/{op} spread={s:.1%}" for size, op, s in spreads)
                        or "no prefix cells with two depths"))
    return checks


def emit_report(result: "BenchResult | Sequence[BenchRow]", csv_path: Optional[Path] = None,
                out: Optional[TextIO] = None) -> list[Check]:
    """Write the CSV (to ``csv_path`` or ``out``) and return the summary checks."""
    rows = result.rows if isinstance(result, BenchResult) else list(result)
    failures = result.failures if isinstance(result, BenchResult) else []
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            write_csv(rows, fh)
    elif out is not None:
        write_csv(rows, out)
    return summarize(rows, failures) if rows else []
