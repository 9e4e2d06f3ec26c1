"""Mock cloud storage that is also a ledger peer.

Plaintext files are served only to identities on the ledger ACL of the
file's registered metadata (the node is the policy enforcement point);
encrypted files are served to any authenticated requestor.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import contract, keys
from .encoding import digest
from .keys import Identity
from .ledger import Transaction, last_nonce
from .network import Network

logger = logging.getLogger(__name__)


class StorageError(Exception):
    code = "StorageError"


class UriTaken(StorageError):
    code = "UriTaken"


class BadSignature(StorageError):
    code = "BadSignature"


class NotFound(StorageError):
    code = "NotFound"


class AccessDenied(StorageError):
    code = "AccessDenied"


def upload_statement(uri: str, file_id: bytes) -> list:
    return ["upload", uri, file_id]


def fetch_statement(uri: str, requestor: str, nonce: bytes) -> list:
    return ["fetch", uri, requestor, nonce]


def sign_upload(identity: Identity, uri: str, payload: bytes) -> bytes:
    return identity.sign_value(upload_statement(uri, digest(payload)))


def sign_fetch(identity: Identity, uri: str) -> tuple[bytes, bytes]:
    nonce = os.urandom(16)
    return nonce, identity.sign_value(fetch_statement(uri, identity.id, nonce))


@dataclass
class StoredFile:
    uri: str
    file_id: bytes
    owner: str
    payload: bytes
    encrypted: bool


class FileStore:
    """Payload store: one file per payload plus an append-only index.

    With ``root=None`` everything stays in memory.
    """

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else None
        self._meta: dict[str, dict] = {}
        self._mem: dict[str, bytes] = {}
        if self.root is not None:
            (self.root / "blobs").mkdir(parents=True, exist_ok=True)
            index = self.root / "index.ndjson"
            if index.exists():
                for line in index.read_text().splitlines():
                    if line.strip():
                        entry = json.loads(line)
                        self._meta[entry["uri"]] = entry

    def __contains__(self, uri: str) -> bool:
        return uri in self._meta

    def put(self, f: StoredFile) -> None:
        entry = {"uri": f.uri, "file_id": f.file_id.hex(), "owner": f.owner,
                 "encrypted": f.encrypted, "blob": f"{len(self._meta):08d}.bin"}
        if self.root is None:
            self._mem[f.uri] = f.payload
        else:
            (self.root / "blobs" / entry["blob"]).write_bytes(f.payload)
            with open(self.root / "index.ndjson", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._meta[f.uri] = entry

    def get(self, uri: str) -> Optional[StoredFile]:
        entry = self._meta.get(uri)
        if entry is None:
            return None
        if self.root is None:
            payload = self._mem[uri]
        else:
            payload = (self.root / "blobs" / entry["blob"]).read_bytes()
        return StoredFile(uri, bytes.fromhex(entry["file_id"]), entry["owner"], payload, entry["encrypted"])


class StorageNode:
    def __init__(self, identity: Identity, network: Network, root: Optional[Path] = None):
        self.identity = identity
        self.network = network
        self.peer = network.storage_peer
        self.files = FileStore(root)
        self.decisions: list[dict] = []
        self._uri_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._nonce_lock = threading.Lock()
        self._nonce = 0

    def _registered_key(self, id: str) -> Optional[bytes]:
        user = self.peer.call("getUser", {"id": id})
        return None if user is None else user["pk"]

    def _next_nonce(self) -> int:
        with self._nonce_lock, self.peer.lock:
            self._nonce = max(self._nonce, last_nonce(self.peer.ledger.state, self.identity.id)) + 1
            return self._nonce

    def upload(self, owner: str, uri: str, payload: bytes, encrypted: bool, signature: bytes,
               min_height: int = 0) -> dict:
        """Store ``payload`` and commit a signed attestation for it.

        Returns the attestation once the storage peer has applied it.
        """
        self.network.link("client->storage").transmit(len(payload))
        if min_height > 0:
            self.peer.wait_for_height(min_height, timeout=30)
        file_id = digest(payload)
        pk = self._registered_key(owner)
        if pk is None or not keys.verify_value(pk, upload_statement(uri, file_id), signature):
            raise BadSignature(f"upload of {uri!r} not signed by {owner!r}")
        with self._locks_guard:
            lock = self._uri_locks[uri]
        with lock:
            if uri in self.files or self.peer.call("getAttestation", {"uri": uri}) is not None:
                raise UriTaken(uri)
            self.files.put(StoredFile(uri, file_id, owner, bytes(payload), bool(encrypted)))
            acl = [owner]
            args = {"uri": uri, "file_id": file_id, "owner": owner, "acl": acl,
                    "storage_sig": self.identity.sign_value(contract.attestation_payload(uri, file_id, owner, acl))}
            receipt = self.network.submit(Transaction.create(self.identity, "attest", args, self._next_nonce()))
        if not receipt.ok:
            raise StorageError(f"attestation rejected: {receipt.error}")
        self.peer.wait_for_height(receipt.height)
        return {"uri": uri, "file_id": file_id, "owner": owner, "acl": acl,
                "storage": self.identity.id, "storage_sig": args["storage_sig"], "height": receipt.height}

    def fetch(self, requestor: str, uri: str, nonce: bytes, signature: bytes, min_height: int = 0) -> bytes:
        """Serve ``uri``; ``min_height`` lets a client read its own committed writes."""
        self.network.link("client->storage").transmit(len(uri) + len(nonce) + len(signature))
        if min_height > 0:
            self.peer.wait_for_height(min_height, timeout=30)
        stored = self.files.get(uri)
        if stored is None:
            raise NotFound(uri)
        pk = self._registered_key(requestor)
        if pk is None or not keys.verify_value(pk, fetch_statement(uri, requestor, nonce), signature):
            raise BadSignature(f"fetch of {uri!r} not signed by {requestor!r}")
        if digest(stored.payload) != stored.file_id:
            raise StorageError(f"stored payload for {uri!r} is corrupt")
        if not stored.encrypted:
            # One ACL snapshot per decision, taken at a single ledger height.
            with self.peer.lock:
                height = self.peer.ledger.height
                mdata = contract.get_data(self.peer.ledger.state, stored.file_id)
            allowed = mdata is not None and uri in mdata["uris"] and requestor in mdata["acl"]
            self.decisions.append({"requestor": requestor, "uri": uri, "file_id": stored.file_id.hex(),
                                   "decision": "grant" if allowed else "deny", "height": height,
                                   "timestamp": time.time()})
            if not allowed:
                raise AccessDenied(f"{requestor!r} is not on the ACL for {uri!r}")
        self.network.link("storage->client").transmit(len(stored.payload))
        return stored.payload
