from __future__ import annotations

import hashlib
import hmac
import itertools
import os

import pytest
from hypothesis import given, settings, strategies as st

from iotshare import prefix
from iotshare.prefix import (EnvelopeCiphertext, MalformedIdentity, MessageTooLarge, PrefixIdentity, PrefixKey,
                             Rejected, UnsupportedParameter, is_prefix_of)

MASTER = prefix.setup(128, seed=b"unit")


def P(text: str) -> PrefixIdentity:
    return PrefixIdentity.parse(text)


def seal(identity: str, message: bytes, master=MASTER) -> EnvelopeCiphertext:
    return prefix.encrypt(master.mpk, identity, message, prefix.extract(master.msk, identity))


def key(identity: str, master=MASTER) -> PrefixKey:
    return prefix.extract(master.msk, identity)


# -- identities ------------------------------------------------------------------

def test_identity_grammar():
    assert P("alice/home/").labels == ("alice", "home")
    assert P("alice").depth == 1
    for bad in ("", "/", "Alice", "a//b", "a b", "x" * 65, "/".join(["a"] * 17), "ä"):
        with pytest.raises(MalformedIdentity):
            P(bad)
    assert P("/".join(["a"] * 16)).depth == 16


@pytest.mark.parametrize("a,b,expected", [
    ("alice", "alice/home", True),
    ("alice/home", "alice/home", True),
    ("alice/ho", "alice/home", False),
    ("alice/home", "alice", False),
    ("alice/car", "alice/home/thermostat", False),
])
def test_is_prefix_of(a, b, expected):
    assert is_prefix_of(P(a), P(b)) is expected


def test_label_prefix_differs_from_string_prefix():
    # enumerate a small alphabet: string-prefix and label-prefix disagree somewhere
    labels = ["a", "ab", "b"]
    ids = ["/".join(p) for n in (1, 2) for p in itertools.product(labels, repeat=n)]
    disagreements = [(x, y) for x in ids for y in ids
                     if y.startswith(x) != is_prefix_of(P(x), P(y))]
    assert ("a", "ab") in disagreements
    assert all(not is_prefix_of(P(x), P(y)) for x, y in disagreements)


# -- setup / extract ------------------------------------------------------------

def test_setup():
    assert prefix.setup(128).msk != prefix.setup(128).msk
    assert len(prefix.setup(256).msk) == 64
    with pytest.raises(UnsupportedParameter):
        prefix.setup(96)


def test_seeded_setup_is_pinned():
    assert prefix.setup(128, seed=b"pinned").msk.hex() == \
        "4a5488bb3dba75fc9e93494ea0110869a14afe2562c63ef54692309586721639"
    assert prefix.setup(128, seed=b"pinned") == prefix.setup(128, seed=b"pinned")


def test_mpk_derivable_from_msk():
    assert prefix.master_public_key(MASTER.msk) == MASTER.mpk


def test_extract_deterministic_and_distinct():
    assert key("alice/home").key_material == key("alice/home").key_material
    assert key("alice/home").key_material != key("alice/car").key_material


def _oracle_material(msk: bytes, identity: str) -> bytes:
    h = hashlib.sha512 if len(msk) == 64 else hashlib.sha256
    k = hmac.new(msk, b"\x00root", h).digest()
    for label in identity.split("/"):
        k = hmac.new(k, b"\x01" + label.encode(), h).digest()
    return k


@pytest.mark.parametrize("param", [128, 256])
def test_chain_derivation_oracle(param):
    master = prefix.setup(param, seed=b"oracle")
    parent = prefix.extract(master.msk, "alice/home")
    child = prefix.extract(master.msk, "alice/home/thermostat")
    assert child.key_material == prefix.derive_step(parent.key_material, "thermostat")
    assert child.key_material == _oracle_material(master.msk, "alice/home/thermostat")


def test_extract_rejects_malformed():
    with pytest.raises(MalformedIdentity):
        prefix.extract(MASTER.msk, "alice//home")


# -- encrypt / decrypt ----------------------------------------------------------

def test_roundtrip_same_identity():
    assert prefix.decrypt(key("alice/home"), seal("alice/home", b"hi")) == b"hi"


def test_parent_key_opens_child():
    ct = seal("alice/home/thermostat", b"21.5C")
    assert prefix.decrypt(key("alice/home"), ct) == b"21.5C"
    assert prefix.decrypt(key("alice"), ct.to_bytes()) == b"21.5C"


def test_fresh_nonce():
    a, b = seal("alice", b"same"), seal("alice", b"same")
    assert a.nonce != b.nonce and a.to_bytes() != b.to_bytes()


@pytest.mark.parametrize("k,ct_id", [
    ("alice/car", "alice/home/thermostat"),
    ("alice/home/thermostat", "alice/home"),
    ("alice/ho", "alice/home"),
    ("bob", "alice"),
])
def test_rejections(k, ct_id):
    with pytest.raises(Rejected):
        prefix.decrypt(key(k), seal(ct_id, b"x"))


def test_other_master_rejected():
    other = prefix.setup(128, seed=b"other")
    with pytest.raises(Rejected):
        prefix.decrypt(key("alice", other), seal("alice", b"x"))


def test_mislabelled_key_rejected():
    # a key claiming the right identity but carrying another identity's material
    forged = PrefixKey(P("alice/home"), key("alice/car").key_material, MASTER.mpk)
    with pytest.raises(Rejected):
        prefix.decrypt(forged, seal("alice/home", b"x"))


def test_rejection_is_uniform():
    ct = seal("alice/home", b"secret").to_bytes()
    tampered = bytearray(ct)
    tampered[-1] ^= 1
    msgs = set()
    for k, c in ((key("alice/car"), ct), (key("alice/home"), bytes(tampered)), (key("alice"), b"junk")):
        with pytest.raises(Rejected) as err:
            prefix.decrypt(k, c)
        msgs.add((type(err.value), str(err.value)))
    assert len(msgs) == 1


def test_every_bit_flip_rejected():
    ct = seal("alice/home/t", b"temperature=21.5").to_bytes()
    k = key("alice/home")
    for pos in range(len(ct)):
        for bit in range(8):
            bad = bytearray(ct)
            bad[pos] ^= 1 << bit
            with pytest.raises(Rejected):
                prefix.decrypt(k, bytes(bad))


def test_truncation_and_extension_rejected():
    ct = seal("alice", b"abc").to_bytes()
    for bad in (ct[:-1], ct + b"\x00", ct[:10], b""):
        with pytest.raises(Rejected):
            prefix.decrypt(key("alice"), bad)


@pytest.mark.parametrize("size", [0, 1, 1024, 1024 * 1024])
def test_roundtrip_sizes(size):
    msg = os.urandom(size)
    assert prefix.decrypt(key("alice/x"), seal("alice/x/y", msg).to_bytes()) == msg


def test_message_too_large(monkeypatch):
    monkeypatch.setattr(prefix, "MAX_MESSAGE", 8)
    with pytest.raises(MessageTooLarge):
        seal("alice", b"123456789")
    assert prefix.decrypt(key("alice"), seal("alice", b"12345678")) == b"12345678"


def test_real_limit_is_64_mib():
    assert prefix.MAX_MESSAGE == 64 * 1024 * 1024


def test_encryptor_needs_key_above_identity():
    with pytest.raises(ValueError):
        prefix.encrypt(MASTER.mpk, "alice/home", b"x", key("alice/car"))


def test_layout():
    ct = seal("alice/home", b"abc").to_bytes()
    assert ct[:4] == b"PFXE" and ct[4] == 1
    assert int.from_bytes(ct[5:7], "big") == len("alice/home")
    off = 7 + len("alice/home") + 24 + 48
    assert int.from_bytes(ct[off:off + 8], "big") == 3
    assert len(ct) == off + 8 + 3 + 16


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=2048), st.lists(st.sampled_from(["a", "b", "c-1"]), min_size=1, max_size=5))
def test_delegated_roundtrip(msg, labels):
    ident = "alice/" + "/".join(labels)
    ct = seal(ident, msg)
    for depth in range(1, len(labels) + 2):
        k = key("/".join(["alice"] + labels[:depth - 1]))
        assert prefix.decrypt(k, ct) == msg


def test_exhaustive_prefix_correctness_depth6_alphabet3():
    labels = ["a", "b", "c"]
    ids = [P("/".join(p)) for n in range(1, 7) for p in itertools.product(labels, repeat=n)]
    assert len(ids) == 1092
    master = prefix.setup(128, seed=b"exhaustive")
    keys = {i: prefix.extract(master.msk, i) for i in ids}
    cts = {i: prefix.encrypt(master.mpk, i, str(i).encode(), keys[i]) for i in ids}
    grants = 0
    for i in ids:
        for j in ids:
            try:
                ok = prefix.decrypt(keys[i], cts[j]) == str(j).encode()
            except Rejected:
                ok = False
            assert ok == is_prefix_of(i, j), (i, j)
            grants += ok
    assert grants == sum(len(j.labels) for j in ids)
