from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from iotshare.cli import main

PAYLOAD = b"temp=21.5C hum=40%\n"


@pytest.fixture
def cli(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "net.conf"
    cfg.write_text("peer_count = 3\nbatch_timeout_ms = 2  # quick batches\nseed = 7\n")
    monkeypatch.setenv("IOTSHARE_HOME", str(tmp_path / "home"))
    monkeypatch.setenv("IOTSHARE_CONFIG", str(cfg))

    def run(*argv: str, expect: int = 0):
        code = main(["--json" if a == "--json" else a for a in argv])
        out, err = capsys.readouterr()
        assert code == expect, (argv, code, out, err)
        return json.loads(out) if "--json" in argv and out.strip() else out

    run.home = tmp_path / "home"
    run.tmp = tmp_path
    return run


def test_empty_list_offers(cli):
    assert cli("list-offers", "--json") == []


def _lifecycle(cli) -> list:
    trace = []
    data = cli.tmp / "reading.bin"
    data.write_bytes(PAYLOAD)
    for who in ("alice", "bob", "eve"):
        trace.append(("register", who, cli("register", who, "--json")["height"]))
    att = cli("upload", "s3://r", str(data), "--as", "alice", "--json")
    file_id = att["file_id"]
    trace.append(("upload", file_id, att["height"]))
    trace.append(("add-data", cli("add-data", file_id, "--uri", "s3://r", "--as", "alice", "--json")["height"]))
    offer = cli("create-offer", file_id, "3.00", "--as", "alice", "--json")
    trace.append(("create-offer", offer["result"]["value"], offer["height"]))
    acc = cli("accept-offer", file_id, "--as", "bob", "--json")
    trace.append(("accept-offer", acc["result"]["value"]["iou"], acc["height"]))
    trace.append(("get-iou", cli("get-iou", "alice", "bob", "--json")["value"]))
    out = cli.tmp / "got.bin"
    cli("fetch", "s3://r", "--as", "bob", "--out", str(out))
    trace.append(("fetch", out.read_bytes() == PAYLOAD))
    return trace


def test_lifecycle_matches_golden_trace(cli):
    file_id = hashlib.sha256(PAYLOAD).hexdigest()
    assert _lifecycle(cli) == [
        ("register", "alice", 1), ("register", "bob", 2), ("register", "eve", 3),
        ("upload", file_id, 4), ("add-data", 5),
        ("create-offer", f"{file_id}#1", 6), ("accept-offer", 300, 7),
        ("get-iou", 300), ("fetch", True),
    ]
    offers = cli("list-offers", "--json")
    assert [(o["state"], o["seller"], o["value"]) for o in offers] == [(False, "alice", 300)]
    text = cli("list-offers")
    assert "inactive seller=alice" in text and "3.00" in text
    assert cli("verify-chain", "--json") == {"ok": True, "blocks": 8, "bad_height": None, "reason": ""}


def test_denials_exit_1(cli):
    _lifecycle(cli)
    err = cli("fetch", "s3://r", "--as", "eve", "--json", expect=1)
    assert err["error"] == "AccessDenied" and err["origin"] == "storage"
    file_id = hashlib.sha256(PAYLOAD).hexdigest()
    cli("create-offer", file_id, "1.50", "--as", "alice")
    cli("revoke-offer", file_id, "--as", "alice")
    err = cli("accept-offer", file_id, "--as", "eve", "--json", expect=1)
    assert err["error"] == "InactiveOffer" and err["origin"] == "ledger"
    assert cli("get-iou", "alice", "eve", "--json")["value"] == 0


def test_usage_errors_exit_2(cli):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    cli("upload", "s3://x", "nofile", expect=2)               # missing --as
    cli("register", "Bad Name!", expect=2)
    cli("register", "alice")
    cli("create-offer", "00" * 32, "-1", "--as", "alice", expect=2)
    cli("create-offer", "zz", "1.00", "--as", "alice", expect=2)
    cli("bench", "--reps", "2", expect=2)


def test_verify_chain_detects_tampering(cli):
    _lifecycle(cli)
    lines = (cli.home / "chain.ndjson").read_text().splitlines()
    raw = bytearray(bytes.fromhex(lines[5]))
    raw[len(raw) // 2] ^= 0x01
    lines[5] = raw.hex()
    bad = cli.tmp / "bad.ndjson"
    bad.write_text("\n".join(lines) + "\n")
    err = cli("verify-chain", "--file", str(bad), "--json", expect=1)
    assert err["error"] == "ChainInvalid"
    assert cli("verify-chain", "--json")["ok"]


def test_prefix_flow(cli):
    data = cli.tmp / "t.bin"
    data.write_bytes(PAYLOAD)
    for who in ("alice", "bob", "eve"):
        cli("register", who)
    att = cli("upload", "s3://enc", str(data), "--as", "alice", "--encrypt-as", "alice/home/thermo", "--json")
    fid = att["file_id"]
    assert fid != hashlib.sha256(PAYLOAD).hexdigest()
    cli("add-data", fid, "--uri", "s3://enc", "--sharing-prefix", "alice/home", "--as", "alice")
    cli("create-offer", fid, "2", "--as", "alice")
    cli("accept-offer", fid, "--as", "bob")
    assert cli("request-key", "alice/home", "--as", "bob", "--json")["prefix"] == "alice/home"
    out = cli.tmp / "plain.bin"
    cli("fetch", "s3://enc", "--as", "bob", "--decrypt", "--out", str(out))
    assert out.read_bytes() == PAYLOAD
    assert cli("request-key", "alice/home", "--as", "eve", "--json", expect=1)["error"] == "Denied"
    assert cli("request-key", "alice", "--as", "bob", "--json", expect=1)["error"] == "Denied"
    # offline decrypt with an explicit key file
    ct = cli.tmp / "ct.bin"
    cli("fetch", "s3://enc", "--as", "bob", "--out", str(ct))
    key = next((cli.home / "prefix-keys" / "bob").glob("*.json"))
    cli("decrypt", str(ct), "--key", str(key), "--out", str(out))
    assert out.read_bytes() == PAYLOAD
    decisions = [json.loads(l) for l in (cli.home / "decisions.ndjson").read_text().splitlines()]
    assert [d["decision"] for d in decisions] == ["grant", "Denied", "Denied"]


def test_config_file_is_honoured(cli, tmp_path, monkeypatch):
    cfg = tmp_path / "broken.conf"
    cfg.write_text("no_such_setting = 1\n")
    monkeypatch.setenv("IOTSHARE_CONFIG", str(cfg))
    with pytest.raises(ValueError):
        main(["list-offers"])


def test_small_bench(cli):
    csv_path = cli.tmp / "bench.csv"
    res = cli("bench", "--sizes", "0.1", "0.2", "--depths", "1", "2", "--reps", "5",
              "--csv", str(csv_path), "--json")
    assert not res["failures"]
    assert [c["name"] for c in res["checks"]] == ["commit_slower_than_fetch", "linear_in_size",
                                                  "depth_insensitive"]
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "scheme,size_mb,depth,op,mean_ms,stddev_ms,reps"
    assert len(lines) == 1 + 2 * (2 + 4)
