from __future__ import annotations

import hashlib
import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import Market, seeded_identity
from iotshare.encoding import ZERO_HASH, encode
from iotshare.ledger import (Block, ChainError, InvalidSignature, Ledger, StaleNonce, Transaction,
                             UnknownFunction, apply_transaction, export_chain, import_chain, replay,
                             verify_chain, verify_encoded_chain)


# Independent re-implementation of the canonical encoding, used as an oracle
# for digests. Deliberately written without looking at the library encoder.
def oracle_encode(v) -> bytes:
    if v is None:
        return b"N"
    if v is True:
        return b"T"
    if v is False:
        return b"F"
    if isinstance(v, int):
        return b"I" + v.to_bytes(8, "big", signed=True)
    if isinstance(v, bytes):
        return b"B" + len(v).to_bytes(4, "big") + v
    if isinstance(v, str):
        raw = v.encode()
        return b"S" + len(raw).to_bytes(4, "big") + raw
    if isinstance(v, list):
        return b"L" + len(v).to_bytes(4, "big") + b"".join(oracle_encode(x) for x in v)
    if isinstance(v, dict):
        items = sorted(v.items(), key=lambda kv: kv[0].encode())
        return b"D" + len(items).to_bytes(4, "big") + b"".join(oracle_encode(k) + oracle_encode(x) for k, x in items)
    raise TypeError(v)


def oracle_block_hash(block: Block) -> bytes:
    tx_ids = []
    for tx in block.transactions:
        body = {"invoker": tx.invoker, "function": tx.function, "args": tx.args,
                "nonce": tx.nonce, "signature": tx.signature}
        tx_ids.append(hashlib.sha256(oracle_encode(body)).digest())
    return hashlib.sha256(oracle_encode({"height": block.height, "prev_hash": block.prev_hash,
                                         "tx_ids": tx_ids, "results": block.results})).digest()


def chain_of(n_blocks: int) -> Market:
    """Exactly ``n_blocks`` blocks (genesis included)."""
    m = Market(ids=("alice",))
    while m.ledger.height < n_blocks - 2:
        m.publish("alice", f"s3://alice/{m.ledger.height}")
    if m.ledger.height < n_blocks - 1:
        m.attest(f"s3://alice/{m.ledger.height}", b"\x07" * 32, "alice")
    assert len(m.ledger.blocks) == n_blocks
    return m


def test_genesis_then_append():
    m = Market(ids=())
    genesis = m.ledger.blocks[0]
    assert genesis.height == 0 and genesis.prev_hash == ZERO_HASH
    m.register("alice")
    block = m.ledger.head
    assert block.height == 1
    assert block.prev_hash == genesis.block_hash


def test_block_hash_matches_oracle():
    m = chain_of(4)
    for block in m.ledger.blocks:
        assert block.block_hash == oracle_block_hash(block)
        for tx in block.transactions:
            assert tx.tx_id == hashlib.sha256(oracle_encode({
                "invoker": tx.invoker, "function": tx.function, "args": tx.args,
                "nonce": tx.nonce, "signature": tx.signature})).digest()


def test_flipped_signature_rejected(market):
    tx = market.tx("alice", "createOffer", {"file_id": b"x" * 32, "value": 1})
    sig = bytearray(tx.signature)
    sig[0] ^= 1
    bad = Transaction(tx.invoker, tx.function, tx.args, tx.nonce, bytes(sig))
    with pytest.raises(InvalidSignature):
        market.ledger.append_block([bad])
    assert market.ledger.height == 2


def test_tx_id_must_match_contents(market):
    tx = market.tx("alice", "createOffer", {"file_id": b"x" * 32, "value": 1})
    forged = Transaction(tx.invoker, tx.function, tx.args, tx.nonce, tx.signature, tx_id=b"\x00" * 32)
    with pytest.raises(InvalidSignature):
        market.ledger.append_block([forged])


def test_replay_is_stale_nonce(market):
    tx = market.tx("alice", "createOffer", {"file_id": b"x" * 32, "value": 1})
    market.ledger.append_block([tx])
    with pytest.raises(StaleNonce):
        market.ledger.append_block([tx])
    # and inside one block
    tx2 = market.tx("bob", "createOffer", {"file_id": b"y" * 32, "value": 1})
    with pytest.raises(StaleNonce):
        market.ledger.append_block([tx2, tx2])
    assert market.ledger.height == 3


def test_unknown_function_and_empty_block(market):
    with pytest.raises(UnknownFunction):
        market.ledger.append_block([market.tx("alice", "mint", {})])
    with pytest.raises(ValueError):
        market.ledger.append_block([])


def test_unregistered_signer_rejected(market):
    eve = seeded_identity("eve")
    tx = Transaction.create(eve, "createOffer", {"file_id": b"x" * 32, "value": 1}, 1)
    with pytest.raises(InvalidSignature):
        market.ledger.append_block([tx])


def test_add_data_delta_has_data_key(market):
    fid = hashlib.sha256(b"payload").digest()
    market.attest("s3://a", fid, "alice")
    tx = market.tx("alice", "addData", {"mdata": market.mdata("alice", fid, ["s3://a"])})
    delta, result = apply_transaction(market.state, tx)
    assert result["ok"]
    assert set(delta) == {"data" + fid.hex()}


def test_failed_call_has_empty_delta(market):
    fid = market.publish("alice", "s3://a")
    market.offer("alice", fid, 300)
    market.accept("bob", fid)
    before = market.state.encode()
    tx = market.tx("bob", "acceptOffer", {"file_id": fid})
    delta, result = apply_transaction(market.state, tx)
    assert delta == {} and result["error"] == "InactiveOffer"
    assert market.state.encode() == before  # apply_transaction never mutates


def test_same_tx_same_delta_on_five_replicas(market):
    fid = market.publish("alice", "s3://a")
    market.offer("alice", fid, 300)
    tx = market.tx("bob", "acceptOffer", {"file_id": fid})
    replicas = [replay(market.ledger.blocks) for _ in range(5)]
    outs = [apply_transaction(r.state, tx) for r in replicas]
    assert all(encode(o[0]) == encode(outs[0][0]) and o[1] == outs[0][1] for o in outs)


def test_failed_calls_are_recorded(market):
    fid = market.publish("alice", "s3://a")
    res = market.offer("bob", fid, 1)
    assert res == {"ok": False, "error": "NotOwner", "message": res["message"]}
    head = market.ledger.head
    assert head.transactions[0].function == "createOffer" and not head.results[0]["ok"]
    # the nonce still advances so the call cannot be replayed
    assert market.state.get("noncebob") == market.nonces["bob"]


# -- chain verification ------------------------------------------------------

def test_untampered_chain_ok():
    assert verify_chain(chain_of(5).ledger.blocks).ok


def test_tampered_prev_hash():
    blocks = list(chain_of(5).ledger.blocks)
    b = blocks[2]
    blocks[2] = Block(b.height, b"\x01" * 32, b.transactions, b.results, b.block_hash)
    report = verify_chain(blocks)
    assert (report.ok, report.bad_height) == (False, 2)


def _flip(data: bytes, pos: int, bit: int = 0) -> bytes:
    out = bytearray(data)
    out[pos] ^= 1 << bit
    return bytes(out)


def test_byte_in_block1_tx_list():
    encoded = [b.encode() for b in chain_of(3).ledger.blocks]
    # the invoker string of the first transaction sits right after its key
    pos = encoded[1].index(b"invoker") + len(b"invoker") + 5
    report = verify_encoded_chain([encoded[0], _flip(encoded[1], pos), encoded[2]])
    assert (report.ok, report.bad_height) == (False, 1)


def test_payload_byte_in_last_block():
    blocks = chain_of(5).ledger.blocks
    encoded = [b.encode() for b in blocks]
    pos = encoded[-1].index(b"s3://alice/") + 3
    encoded[-1] = _flip(encoded[-1], pos)
    report = verify_encoded_chain(encoded)
    assert (report.ok, report.bad_height) == (False, len(encoded) - 1)


def test_apply_block_rejects_rewritten_results(market):
    fid = market.publish("alice", "s3://a")
    tx = market.tx("alice", "createOffer", {"file_id": fid, "value": 1})
    good = Block(market.ledger.height + 1, market.ledger.head.block_hash, [tx], [{"ok": True, "value": "x"}])
    with pytest.raises(ChainError):
        replay(market.ledger.blocks).apply_block(good)


def test_export_import_roundtrip(tmp_path):
    m = chain_of(4)
    path = tmp_path / "chain.ndjson"
    export_chain(m.ledger.blocks, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4 and all(bytes.fromhex(l) == b.encode() for l, b in zip(lines, m.ledger.blocks))
    again = replay(import_chain(path))
    assert again.state == m.state
    assert again.state.encode() == m.state.encode()


def test_undecodable_block_reported_at_index():
    encoded = [b.encode() for b in chain_of(3).ledger.blocks]
    report = verify_encoded_chain([encoded[0], encoded[1][:-1], encoded[2]])
    assert (report.ok, report.bad_height) == (False, 1)


# -- properties ----------------------------------------------------------------

op = st.tuples(st.sampled_from(["publish", "offer", "revoke", "accept", "bogus"]),
               st.sampled_from(["alice", "bob", "carol"]), st.integers(0, 3), st.integers(0, 500))


@settings(max_examples=25, deadline=None)
@given(st.lists(op, min_size=1, max_size=25))
def test_replay_equals_incremental(ops):
    m = Market(ids=("alice", "bob", "carol"))
    files = {}
    for kind, who, idx, price in ops:
        fid = files.get(idx)
        if kind == "publish" and idx not in files:
            files[idx] = m.publish(who, f"s3://{who}/{idx}")
        elif kind == "offer" and fid:
            m.offer(who, fid, price)
        elif kind == "revoke" and fid:
            m.call(who, "revokeOffer", {"file_id": fid})
        elif kind == "accept" and fid:
            m.accept(who, fid)
        elif kind == "bogus":
            m.call(who, "acceptOffer", {"file_id": b"nope"})
    again = replay(m.ledger.blocks)
    assert again.state.encode() == m.state.encode()
    assert [b.encode() for b in again.blocks] == [b.encode() for b in m.ledger.blocks]
    assert verify_chain(m.ledger.blocks).ok


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["createOffer", "acceptOffer", "revokeOffer", "addData"]),
       st.dictionaries(st.sampled_from(["file_id", "value", "mdata"]),
                       st.none() | st.integers(-5, 5) | st.binary(max_size=33) | st.text(max_size=4)))
def test_failed_calls_write_nothing(function, args):
    m = Market()
    fid = m.publish("alice", "s3://a")
    m.offer("alice", fid, 5)
    before = dict(m.state.entries)
    result = m.call("bob", function, args)
    after = dict(m.state.entries)
    changed = {k for k in before.keys() | after.keys() if before.get(k) != after.get(k)}
    if not result["ok"]:
        assert changed == {"noncebob"}
