from __future__ import annotations

import hashlib
from typing import Optional

import pytest

from iotshare import contract
from iotshare.domain import Domain, storage_genesis
from iotshare.encoding import digest
from iotshare.keys import Identity
from iotshare.ledger import Ledger, Transaction
from iotshare.network import NetworkConfig

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def seeded_identity(id: str) -> Identity:
    return Identity.from_seed(id, hashlib.sha256(b"test-identity:" + id.encode()).digest())


class Market:
    """Single in-process ledger, one transaction per block. No network."""

    def __init__(self, ids=("alice", "bob")):
        self.storage = seeded_identity("storage")
        self.ledger = Ledger(storage_genesis(self.storage))
        self.ids: dict[str, Identity] = {}
        self.nonces: dict[str, int] = {"storage": 1}
        for id in ids:
            self.register(id)

    @property
    def state(self):
        return self.ledger.state

    def tx(self, who: str, function: str, args) -> Transaction:
        ident = self.storage if who == "storage" else self.ids[who]
        self.nonces[who] = self.nonces.get(who, 0) + 1
        return Transaction.create(ident, function, args, self.nonces[who])

    def call(self, who: str, function: str, args) -> dict:
        block = self.ledger.append_block([self.tx(who, function, args)])
        return block.results[0]

    def register(self, id: str) -> dict:
        self.ids[id] = seeded_identity(id)
        return self.call(id, "register", {"id": id, "pk": self.ids[id].public_key})

    def attest(self, uri: str, file_id: bytes, owner: str, acl: Optional[list] = None) -> dict:
        acl = [owner] if acl is None else acl
        sig = self.storage.sign_value(contract.attestation_payload(uri, file_id, owner, acl))
        return self.call("storage", "attest", {"uri": uri, "file_id": file_id, "owner": owner,
                                               "acl": acl, "storage_sig": sig})

    def mdata(self, owner: str, file_id: bytes, uris, acl=None, sharing_prefix=None) -> dict:
        return {"id": file_id.hex(), "file_id": file_id, "owner": owner, "uris": list(uris),
                "acl": [owner] if acl is None else acl, "sharing_prefix": sharing_prefix}

    def publish(self, owner: str, uri: str, payload: bytes = b"", sharing_prefix=None) -> bytes:
        file_id = digest(payload or uri.encode())
        assert self.attest(uri, file_id, owner)["ok"]
        res = self.call(owner, "addData", {"mdata": self.mdata(owner, file_id, [uri],
                                                                sharing_prefix=sharing_prefix)})
        assert res["ok"], res
        return file_id

    def offer(self, owner: str, file_id: bytes, value: int) -> dict:
        return self.call(owner, "createOffer", {"file_id": file_id, "value": value})

    def accept(self, buyer: str, file_id: bytes) -> dict:
        return self.call(buyer, "acceptOffer", {"file_id": file_id})


@pytest.fixture
def market():
    return Market()


def fast_config(**kw) -> NetworkConfig:
    base = dict(peer_count=5, batch_timeout_ms=2.0, seed=0)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture
def domain():
    with Domain(fast_config(), seeded_identity("storage")) as d:
        yield d


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'} [{number}] {name}" + (f": {detail}" if detail else "")
    print(line)
    ACCEPTANCE.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number}] {name}"
                                    + (f": {detail}" if detail else ""))
