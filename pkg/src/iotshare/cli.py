"""Operator command line.

Every invocation boots the domain from the state directory (``--home`` or
``$IOTSHARE_HOME``, default ``./.iotshare``), runs one command through the
router, and writes the chain back when the network is quiet. Network
settings come from ``--config`` or ``$IOTSHARE_CONFIG`` (``key = value``
lines), with ``--peers``/``--seed`` overriding the file.

Layout of the state directory::

    chain.ndjson         one hex-encoded block per line
    keys/<id>.key        identity signing keys (storage node included)
    masters/<ns>.json    namespace master keys held by the key authority
    prefix-keys/<id>/    prefix keys obtained with request-key
    storage/             payload store of the storage node
    decisions.ndjson     key-authority decision log

Exit status: 0 on success, 1 on a domain error, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import prefix
from .bench import DESK_SIZES_MB, LARGE_SIZES_MB, SCHEMES, BenchConfig, bench_network_config, emit_report, run_bench
from .contract import format_price, parse_price
from .domain import STORAGE_ID, Client, Domain, DomainError
from .keys import Identity, valid_identity_id
from .ledger import ContractError, export_chain, import_chain, read_chain_lines, verify_encoded_chain
from .network import NetworkConfig
from .prefix import MasterKeyPair, PrefixKey, PrefixIdentity

logger = logging.getLogger("iotshare")

HOME_ENV = "IOTSHARE_HOME"
CONFIG_ENV = "IOTSHARE_CONFIG"


class UsageError(Exception):
    pass


def _plain(value: Any) -> Any:
    """Ledger values -> JSON-able values (bytes as hex)."""
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _hex_id(text: str) -> bytes:
    try:
        data = bytes.fromhex(text)
    except ValueError:
        raise UsageError(f"file id must be hex, got {text!r}") from None
    if len(data) != 32:
        raise UsageError("file id must be 32 bytes (64 hex digits)")
    return data


# -- state directory ----------------------------------------------------------

class Home:
    def __init__(self, root: Path):
        self.root = root
        self.keys = root / "keys"
        self.masters = root / "masters"
        self.prefix_keys = root / "prefix-keys"
        self.chain = root / "chain.ndjson"
        self.storage = root / "storage"
        self.decisions = root / "decisions.ndjson"

    def ensure(self) -> None:
        for d in (self.root, self.keys, self.masters, self.prefix_keys, self.storage):
            d.mkdir(parents=True, exist_ok=True)

    def identity(self, id: str) -> Identity:
        path = self.keys / f"{id}.key"
        if not path.exists():
            raise UsageError(f"no key for {id!r} in {self.keys}; run 'register {id}' first")
        return Identity.load(path)

    def storage_identity(self) -> Identity:
        path = self.keys / f"{STORAGE_ID}.key"
        if path.exists():
            return Identity.load(path)
        ident = Identity.generate(STORAGE_ID)
        ident.save(path)
        return ident

    def load_master(self, namespace: str) -> Optional[MasterKeyPair]:
        path = self.masters / f"{namespace}.json"
        if not path.exists():
            return None
        data = json.loads(path.read_text())
        return MasterKeyPair(bytes.fromhex(data["mpk"]), bytes.fromhex(data["msk"]), data["security_param"])

    def save_master(self, namespace: str, master: MasterKeyPair) -> None:
        path = self.masters / f"{namespace}.json"
        path.write_text(json.dumps({"mpk": master.mpk.hex(), "msk": master.msk.hex(),
                                    "security_param": master.security_param}) + "\n")
        path.chmod(0o600)

    def prefix_key_path(self, id: str, identity: PrefixIdentity) -> Path:
        return self.prefix_keys / id / (".".join(identity.labels) + ".json")

    def save_prefix_key(self, id: str, key: PrefixKey) -> Path:
        path = self.prefix_key_path(id, key.identity)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(prefix_key_to_json(key)) + "\n")
        path.chmod(0o600)
        return path

    def prefix_keys_of(self, id: str) -> list[PrefixKey]:
        d = self.prefix_keys / id
        return [prefix_key_from_json(json.loads(p.read_text())) for p in sorted(d.glob("*.json"))] \
            if d.exists() else []


def prefix_key_to_json(key: PrefixKey) -> dict:
    return {"identity": str(key.identity), "key_material": key.key_material.hex(), "mpk": key.mpk.hex()}


def prefix_key_from_json(data: dict) -> PrefixKey:
    return PrefixKey(PrefixIdentity.parse(data["identity"]), bytes.fromhex(data["key_material"]),
                     bytes.fromhex(data["mpk"]))


def load_config(args: argparse.Namespace) -> NetworkConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    overrides = {"peer_count": args.peers, "seed": args.seed}
    if path:
        return NetworkConfig.from_file(Path(path), **overrides)
    return NetworkConfig().with_overrides(**overrides)


class Session:
    """A booted domain bound to a state directory."""

    def __init__(self, home: Home, config: NetworkConfig):
        self.home = home
        home.ensure()
        chain = import_chain(home.chain) if home.chain.exists() else None
        self.domain = Domain(config, home.storage_identity(), chain=chain, storage_root=home.storage,
                             authority_log=home.decisions)
        for path in sorted(home.masters.glob("*.json")):
            self.domain.authority.enroll(path.stem, home.load_master(path.stem))

    def __enter__(self) -> "Session":
        self.domain.start()
        return self

    def __exit__(self, *exc) -> None:
        try:
            self.domain.network.wait_quiescent()
            export_chain(self.domain.network.api_peer.blocks(), self.home.chain)
        finally:
            self.domain.stop()

    def client(self, id: str) -> Client:
        return self.domain.client(self.home.identity(id))


# -- commands -----------------------------------------------------------------

def _need_as(args) -> str:
    if not args.as_id:
        raise UsageError("this command needs --as <identity>")
    return args.as_id


def cmd_register(args, home: Home, config: NetworkConfig):
    if not valid_identity_id(args.id) or args.id == STORAGE_ID:
        raise UsageError(f"invalid identity id {args.id!r}")
    path = home.keys / f"{args.id}.key"
    home.ensure()
    ident = Identity.load(path) if path.exists() else Identity.generate(args.id)
    with Session(home, config) as s:
        body = s.domain.client(ident).register()
    ident.save(path)
    return {"id": args.id, "pk": ident.public_key.hex(), "height": body["height"]}, \
        f"registered {args.id} at height {body['height']}"


def cmd_upload(args, home: Home, config: NetworkConfig):
    owner = _need_as(args)
    payload = Path(args.file).read_bytes()
    with Session(home, config) as s:
        client = s.client(owner)
        if args.encrypt_as:
            ident = PrefixIdentity.parse(args.encrypt_as)
            master = home.load_master(ident.root)
            if ident.root != owner:
                raise UsageError("--encrypt-as must be inside the uploader's namespace")
            if master is None:
                master = prefix.setup(128)
                home.save_master(ident.root, master)
            client.setup_namespace(s.domain.authority, master)
            att = client.encrypt_upload(args.uri, str(ident), payload)
        else:
            att = client.upload(args.uri, payload)
    att = _plain(att)
    return att, f"{att['uri']} file_id={att['file_id']} height={att['height']}"


def cmd_add_data(args, home: Home, config: NetworkConfig):
    owner = _need_as(args)
    file_id = _hex_id(args.file_id)
    with Session(home, config) as s:
        body = s.client(owner).add_data(file_id, args.uri, sharing_prefix=args.sharing_prefix)
    return _plain(body), f"added {args.file_id} at height {body['height']}"


def cmd_create_offer(args, home: Home, config: NetworkConfig):
    owner = _need_as(args)
    file_id = _hex_id(args.file_id)
    try:
        price = parse_price(args.price)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with Session(home, config) as s:
        body = s.client(owner).create_offer(file_id, price)
    return _plain(body), f"offer {body['result']['value']} at {format_price(price)}"


def cmd_revoke_offer(args, home: Home, config: NetworkConfig):
    owner = _need_as(args)
    with Session(home, config) as s:
        body = s.client(owner).revoke_offer(_hex_id(args.file_id))
    return _plain(body), f"revoked offer for {args.file_id}"


def cmd_accept_offer(args, home: Home, config: NetworkConfig):
    buyer = _need_as(args)
    with Session(home, config) as s:
        body = s.client(buyer).accept_offer(_hex_id(args.file_id))
    value = body["result"]["value"]
    return _plain(body), f"accepted {value['offer_id']}; IOU now {format_price(value['iou'])}"


def _query(home: Home, config: NetworkConfig, function: str, **fargs) -> Any:
    with Session(home, config) as s:
        return s.domain.network.call(function, fargs)


def cmd_list_offers(args, home: Home, config: NetworkConfig):
    offers = _plain(_query(home, config, "listOffers", active_only=args.active))
    lines = [f"{o['id']} {format_price(o['value'])} {'active' if o['state'] else 'inactive'} "
             f"seller={o['seller']}" for o in offers]
    return offers, "\n".join(lines) if lines else "no offers"


def cmd_get_iou(args, home: Home, config: NetworkConfig):
    value = _query(home, config, "getIOU", a=args.a, b=args.b)
    return {"a": args.a, "b": args.b, "value": value, "amount": format_price(value)}, format_price(value)


def cmd_fetch(args, home: Home, config: NetworkConfig):
    requestor = _need_as(args)
    with Session(home, config) as s:
        client = s.client(requestor)
        data = client.fetch(args.uri)
    if args.decrypt:
        data = _decrypt_with_saved(home, requestor, data)
    if args.out:
        Path(args.out).write_bytes(data)
    elif not args.json:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return {"uri": args.uri, "size": len(data), "out": args.out}, None if not args.out else \
        f"wrote {len(data)} bytes to {args.out}"


def cmd_request_key(args, home: Home, config: NetworkConfig):
    requestor = _need_as(args)
    with Session(home, config) as s:
        key = s.client(requestor).request_key(args.prefix)
    path = home.save_prefix_key(requestor, key)
    return {"prefix": str(key.identity), "path": str(path)}, f"key for {key.identity} saved to {path}"


def _decrypt_with_saved(home: Home, id: str, data: bytes, key_path: Optional[str] = None) -> bytes:
    try:
        ct = prefix.EnvelopeCiphertext.from_bytes(data)
    except prefix.Rejected:
        raise DomainError("Rejected", "not a prefix ciphertext", "client") from None
    if key_path:
        keys = [prefix_key_from_json(json.loads(Path(key_path).read_text()))]
    else:
        keys = [k for k in home.prefix_keys_of(id) if k.identity.is_prefix_of(ct.identity)]
    for key in keys:
        try:
            return prefix.decrypt(key, ct)
        except prefix.Rejected:
            continue
    raise DomainError("Rejected", f"no usable key for {ct.identity}", "client")


def cmd_decrypt(args, home: Home, config: NetworkConfig):
    if not args.key:
        _need_as(args)
    data = _decrypt_with_saved(home, args.as_id, Path(args.input).read_bytes(), args.key)
    if args.out:
        Path(args.out).write_bytes(data)
    elif not args.json:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return {"size": len(data), "out": args.out}, None if not args.out else f"wrote {len(data)} bytes to {args.out}"


def cmd_verify_chain(args, home: Home, config: NetworkConfig):
    path = Path(args.file) if args.file else home.chain
    if not path.exists():
        raise UsageError(f"no chain at {path}")
    try:
        encoded = read_chain_lines(path)
    except ValueError:
        raise DomainError("ChainCorrupt", f"{path} is not a hex block file", "ledger") from None
    report = verify_encoded_chain(encoded)
    out = {"ok": report.ok, "blocks": len(encoded), "bad_height": report.bad_height, "reason": report.reason}
    if not report.ok:
        raise DomainError("ChainInvalid", f"block {report.bad_height}: {report.reason}", "ledger", out)
    return out, f"chain ok, {len(encoded)} blocks"


def cmd_bench(args, home: Home, config: NetworkConfig):
    sizes = LARGE_SIZES_MB if args.large_sizes else (args.sizes or DESK_SIZES_MB)
    schemes = SCHEMES if args.scheme == "both" else (args.scheme,)
    try:
        cfg = BenchConfig(sizes_mb=tuple(sizes), depths=tuple(args.depths or range(1, 7)), reps=args.reps,
                          schemes=schemes, seed=args.seed if args.seed is not None else 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net = bench_network_config(cfg.seed)
    if args.config or os.environ.get(CONFIG_ENV):
        net = load_config(args)
    result = run_bench(cfg, net, progress=None if args.json else
                       lambda r: print(f"  {r.scheme} {r.size_mb:g}MB depth={r.depth} {r.op}: "
                                       f"{r.mean_ms:.1f} +/- {r.stddev_ms:.1f} ms", file=sys.stderr))
    csv_path = Path(args.csv) if args.csv else None
    if args.json:
        checks = emit_report(result, csv_path)
    else:
        checks = emit_report(result, csv_path, None if csv_path else sys.stdout)
        for c in checks:
            print(c.line(), file=sys.stdout if csv_path else sys.stderr)
    payload = {"csv": args.csv, "failures": result.failures,
               "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks],
               "rows": [vars(r) for r in result.rows]}
    if result.failures:
        raise DomainError("BenchFailed", f"{len(result.failures)} cell(s) failed", "bench", payload)
    return payload, None


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--home", help=f"state directory (default ${HOME_ENV} or ./.iotshare)")
    common.add_argument("--config", help=f"network config file (default ${CONFIG_ENV})")
    common.add_argument("--peers", type=int, help="override peer_count")
    common.add_argument("--seed", type=int, help="override the network / bench seed")
    common.add_argument("--as", dest="as_id", metavar="ID", help="act as this identity")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="iotshare", description="IoT data-sharing marketplace on a "
                                     "simulated permissioned ledger.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("register", cmd_register, "create a key for ID and register it on the ledger")
    p.add_argument("id")

    p = add("upload", cmd_upload, "upload a file to the storage node")
    p.add_argument("uri")
    p.add_argument("file")
    p.add_argument("--encrypt-as", metavar="IDENTITY", help="prefix-encrypt under this device identity")

    p = add("add-data", cmd_add_data, "register metadata for an uploaded file")
    p.add_argument("file_id")
    p.add_argument("--uri", action="append", required=True)
    p.add_argument("--sharing-prefix")

    p = add("create-offer", cmd_create_offer, "offer a file for sale")
    p.add_argument("file_id")
    p.add_argument("price", help="decimal amount, e.g. 3.00")

    p = add("revoke-offer", cmd_revoke_offer, "withdraw an active offer")
    p.add_argument("file_id")

    p = add("list-offers", cmd_list_offers, "list offers")
    p.add_argument("--active", action="store_true", help="only active offers")

    p = add("accept-offer", cmd_accept_offer, "buy access to a file")
    p.add_argument("file_id")

    p = add("get-iou", cmd_get_iou, "balance between two identities")
    p.add_argument("a")
    p.add_argument("b")

    p = add("fetch", cmd_fetch, "download a file from the storage node")
    p.add_argument("uri")
    p.add_argument("--out", "-o")
    p.add_argument("--decrypt", action="store_true", help="decrypt with a saved prefix key")

    p = add("request-key", cmd_request_key, "obtain a prefix key from the key authority")
    p.add_argument("prefix")

    p = add("decrypt", cmd_decrypt, "decrypt a prefix ciphertext file")
    p.add_argument("input")
    p.add_argument("--key", help="prefix key file (default: saved keys of --as)")
    p.add_argument("--out", "-o")

    p = add("verify-chain", cmd_verify_chain, "check hash links and block hashes")
    p.add_argument("--file", help="chain file (default: the state directory's chain)")

    p = add("bench", cmd_bench, "commit/fetch latency benchmark")
    p.add_argument("--sizes", type=float, nargs="+", metavar="MB")
    p.add_argument("--large-sizes", action="store_true", help="use 1, 5, 10 and 20 MB")
    p.add_argument("--depths", type=int, nargs="+")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--scheme", choices=(*SCHEMES, "both"), default="both")
    p.add_argument("--csv", help="write the CSV here instead of stdout")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    home = Home(Path(args.home or os.environ.get(HOME_ENV) or ".iotshare"))
    try:
        config = load_config(args)
        result, text = args.func(args, home, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ContractError, prefix.MalformedIdentity, OSError) as exc:
        if isinstance(exc, DomainError):
            code, origin, message = exc.code, exc.origin, exc.message
        elif isinstance(exc, ContractError):
            code, origin, message = exc.code, "ledger", exc.message
        else:
            code, origin, message = type(exc).__name__, "client", str(exc)
        if args.json:
            print(json.dumps({"ok": False, "error": code, "origin": origin, "message": message}))
        else:
            print(f"error: {code} ({origin}): {message}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(result, sort_keys=True))
    elif text:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
