"""Wiring for one IoT domain, and a client that talks to it through the router."""
from __future__ import annotations

import itertools
import logging
import threading
from pathlib import Path
from typing import Any, Optional, Sequence

from . import prefix
from .authority import KeyAuthority, KeyRequest, WrappedKeyResponse, unwrap_key
from .encoding import digest
from .keys import Identity
from .ledger import Block, Transaction
from .network import Network, NetworkConfig
from .prefix import MasterKeyPair, PrefixKey
from .router import (DomainMessage, Router, b64d, b64e, from_json_value, to_json_value,
                     tx_to_json)
from .storage import StorageNode, sign_fetch, sign_upload

logger = logging.getLogger(__name__)

STORAGE_ID = "storage"


class DomainError(Exception):
    """An error response from the router, carrying its code and origin."""

    def __init__(self, code: str, message: str = "", origin: str = "router", body: Any = None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message
        self.origin = origin
        self.body = body


def storage_genesis(identity: Identity) -> list[Transaction]:
    return [Transaction.create(identity, "register",
                               {"id": identity.id, "pk": identity.public_key, "role": "storage"}, 1)]


class Domain:
    """Network + storage node + key authority + router, started together."""

    def __init__(self, config: Optional[NetworkConfig] = None, storage_identity: Optional[Identity] = None,
                 chain: Optional[Sequence[Block]] = None, storage_root: Optional[Path] = None,
                 authority_log: Optional[Path] = None, auto_sync: bool = True):
        self.storage_identity = storage_identity or Identity.generate(STORAGE_ID)
        genesis = () if chain else storage_genesis(self.storage_identity)
        self.network = Network(config, genesis, chain=chain)
        self.storage = StorageNode(self.storage_identity, self.network, storage_root)
        self.authority = KeyAuthority(self.network, log_path=authority_log)
        self.router = Router(self.network, self.storage, self.authority, auto_sync=auto_sync)

    def start(self) -> "Domain":
        self.network.start()
        return self

    def stop(self) -> None:
        self.network.stop()

    def __enter__(self) -> "Domain":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def client(self, identity: Identity) -> "Client":
        return Client(self.router, identity)

    def register(self, id: str, identity: Optional[Identity] = None) -> "Client":
        client = self.client(identity or Identity.generate(id))
        client.register()
        return client


class Client:
    """An IoT stakeholder: signs its own requests and sends them via the router."""

    _ids = itertools.count()

    def __init__(self, router: Router, identity: Identity):
        self.router = router
        self.identity = identity
        self._nonce = 0
        self._lock = threading.Lock()
        self.master: Optional[MasterKeyPair] = None
        self.keys: dict[str, PrefixKey] = {}
        self.last_height = 0

    @property
    def id(self) -> str:
        return self.identity.id

    def send(self, kind: str, body: dict) -> dict:
        msg = DomainMessage(kind, self.id, body, f"{self.id}-{next(self._ids)}")
        resp = self.router.route(msg)
        if not resp["ok"]:
            err = resp["error"]
            raise DomainError(err["code"], err["message"], resp["origin"], resp.get("body"))
        return resp["body"]

    # -- ledger ------------------------------------------------------------

    def query(self, function: str, **args) -> Any:
        body = self.send("contract-query", {"function": function, "args": to_json_value(args)})
        return from_json_value(body["value"])

    def _next_nonce(self, function: str) -> int:
        # Unregistered identities have no committed nonce and may not query.
        fresh = self._nonce == 0 and function != "register"
        committed = self.query("getNonce", id=self.id) if fresh else 0
        self._nonce = max(self._nonce, committed) + 1
        return self._nonce

    def invoke(self, function: str, args: Any) -> dict:
        """Commit a contract call; returns ``{tx_id, height, result}``."""
        with self._lock:
            tx = Transaction.create(self.identity, function, args, self._next_nonce(function))
        try:
            body = self.send("contract-invoke", {"transaction": tx_to_json(tx)})
        except DomainError as exc:
            if isinstance(exc.body, dict):
                self.last_height = max(self.last_height, exc.body.get("height", 0))
            raise
        self.last_height = max(self.last_height, body["height"])
        return body

    def register(self) -> dict:
        return self.invoke("register", {"id": self.id, "pk": self.identity.public_key})

    def add_data(self, file_id: bytes, uris: list, sharing_prefix: Optional[str] = None,
                 acl: Optional[list] = None) -> dict:
        mdata = {"id": file_id.hex(), "file_id": file_id, "owner": self.id, "uris": list(uris),
                 "acl": [self.id] if acl is None else list(acl), "sharing_prefix": sharing_prefix}
        return self.invoke("addData", {"mdata": mdata})

    def create_offer(self, file_id: bytes, value: int) -> dict:
        return self.invoke("createOffer", {"file_id": file_id, "value": value})

    def revoke_offer(self, file_id: bytes) -> dict:
        return self.invoke("revokeOffer", {"file_id": file_id})

    def accept_offer(self, file_id: bytes) -> dict:
        return self.invoke("acceptOffer", {"file_id": file_id})

    def list_offers(self, active_only: bool = False) -> list:
        return self.query("listOffers", active_only=active_only)

    def get_iou(self, other: str) -> int:
        return self.query("getIOU", a=self.id, b=other)

    def get_data(self, file_id: bytes) -> Optional[dict]:
        return self.query("getData", file_id=file_id)

    # -- storage -------------------------------------------------------------

    def upload(self, uri: str, payload: bytes, encrypted: bool = False) -> dict:
        body = {"uri": uri, "payload": b64e(payload), "encrypted": encrypted,
                "signature": b64e(sign_upload(self.identity, uri, payload)),
                "min_height": self.last_height}
        att = from_json_value(self.send("upload", body))
        self.last_height = max(self.last_height, att["height"])
        return att

    def fetch(self, uri: str) -> bytes:
        nonce, sig = sign_fetch(self.identity, uri)
        body = self.send("fetch", {"uri": uri, "nonce": b64e(nonce), "signature": b64e(sig),
                                   "min_height": self.last_height})
        return b64d(body["payload"])

    # -- prefix encryption ---------------------------------------------------

    def setup_namespace(self, authority: Optional[KeyAuthority] = None,
                        master: Optional[MasterKeyPair] = None) -> MasterKeyPair:
        """Create (or adopt) the master key pair for ``<id>/`` and delegate it."""
        self.master = master or prefix.setup(128)
        if authority is not None:
            authority.enroll(self.id, self.master)
        return self.master

    def device_key(self, identity: str) -> PrefixKey:
        if self.master is None:
            raise RuntimeError(f"{self.id} has no master key; call setup_namespace first")
        return prefix.extract(self.master.msk, identity)

    def encrypt_upload(self, uri: str, identity: str, payload: bytes) -> dict:
        """Encrypt as the device ``identity`` would, then upload the ciphertext."""
        ct = prefix.encrypt(self.master.mpk, identity, payload, self.device_key(identity))
        return self.upload(uri, ct.to_bytes(), encrypted=True)

    def request_key(self, prefix_text: str, min_height: Optional[int] = None) -> PrefixKey:
        min_height = self.last_height if min_height is None else min_height
        req = KeyRequest.create(self.identity, prefix_text, min_height)
        body = self.send("key-request", {
            "prefix": req.prefix, "requestor_pk": b64e(req.requestor_pk), "nonce": b64e(req.nonce),
            "signature": b64e(req.signature), "min_height": req.min_height})
        resp = WrappedKeyResponse(body["prefix"], b64d(body["wrapped_key"]),
                                  bytes.fromhex(body["grant_tx_ref"]), body["height"])
        key = unwrap_key(resp, self.identity)
        self.keys[str(key.identity)] = key
        return key

    def fetch_decrypt(self, uri: str, key: Optional[PrefixKey] = None) -> bytes:
        data = self.fetch(uri)
        ct = prefix.EnvelopeCiphertext.from_bytes(data)
        if key is None:
            key = next((k for k in self.keys.values() if k.identity.is_prefix_of(ct.identity)), None)
            if key is None:
                raise prefix.Rejected()
        return prefix.decrypt(key, ct)


def file_id_of(payload: bytes) -> bytes:
    return digest(payload)
