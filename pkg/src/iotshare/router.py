"""Domain router: classifies inbound messages and dispatches them.

Data-stream messages (``upload``, ``fetch``) go to the storage node,
contract traffic goes to the ledger through the API peer, and key requests
go to the key authority. Responses echo the correlation id and carry the
downstream result unchanged, or an error tagged with where it came from.

Wire format (JSON, snake_case, binary fields base64)::

    {"kind": ..., "sender": ..., "correlation_id": ..., "body": {...}}
    {"correlation_id": ..., "ok": true,  "origin": ..., "body": {...}}
    {"correlation_id": ..., "ok": false, "origin": ..., "error": {"code": ..., "message": ...}}

Ledger values inside JSON represent bytes as ``{"$bytes": "<base64>"}``.
"""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Optional

from .authority import AuthorityError, KeyAuthority, KeyRequest
from .ledger import ContractError, Transaction
from .network import Network, NetworkStopped, TransactionRejected
from .storage import StorageError, StorageNode

logger = logging.getLogger(__name__)

KINDS = ("upload", "fetch", "contract-invoke", "contract-query", "key-request")


class RouteError(Exception):
    def __init__(self, code: str, message: str = "", origin: str = "router"):
        super().__init__(f"{origin}:{code}: {message}")
        self.code = code
        self.message = message
        self.origin = origin


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    if not isinstance(text, str):
        raise RouteError("BadRequest", "expected a base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError):
        raise RouteError("BadRequest", "invalid base64") from None


def to_json_value(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return {"$bytes": b64e(bytes(value))}
    if isinstance(value, dict):
        return {k: to_json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_json_value(v) for v in value]
    return value


def from_json_value(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"$bytes"}:
            return b64d(value["$bytes"])
        return {k: from_json_value(v) for k, v in value.items()}
    if isinstance(value, list):
        return [from_json_value(v) for v in value]
    if isinstance(value, float):
        raise RouteError("BadRequest", "floats are not ledger values")
    return value


def tx_to_json(tx: Transaction) -> dict:
    return {"invoker": tx.invoker, "function": tx.function, "args": to_json_value(tx.args),
            "nonce": tx.nonce, "signature": b64e(tx.signature)}


def tx_from_json(data: Any) -> Transaction:
    if not isinstance(data, dict):
        raise RouteError("BadRequest", "transaction must be an object")
    try:
        tx = Transaction(data["invoker"], data["function"], from_json_value(data["args"]),
                         data["nonce"], b64d(data["signature"]))
    except KeyError as exc:
        raise RouteError("BadRequest", f"missing field {exc}") from None
    if not (isinstance(tx.invoker, str) and isinstance(tx.function, str) and type(tx.nonce) is int):
        raise RouteError("BadRequest", "bad transaction field types")
    return tx


@dataclass
class DomainMessage:
    kind: str
    sender: str
    body: dict = field(default_factory=dict)
    correlation_id: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sender": self.sender, "body": self.body,
                "correlation_id": self.correlation_id}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Any) -> "DomainMessage":
        if not isinstance(data, dict):
            raise RouteError("BadRequest", "message must be an object")
        kind, sender, body = data.get("kind"), data.get("sender"), data.get("body", {})
        cid = data.get("correlation_id", "")
        if not isinstance(kind, str) or not isinstance(sender, str) or not isinstance(body, dict):
            raise RouteError("BadRequest", "kind/sender must be strings and body an object")
        return cls(kind, sender, body, cid if isinstance(cid, str) else str(cid))


def _min_height(body: dict) -> int:
    value = body.get("min_height", 0)
    return value if type(value) is int else 0


def _field(body: dict, name: str, kind: type) -> Any:
    value = body.get(name)
    if type(value) is not kind:
        raise RouteError("BadRequest", f"field {name!r} must be {kind.__name__}")
    return value


class Router:
    def __init__(self, network: Network, storage: StorageNode, authority: Optional[KeyAuthority] = None,
                 auto_sync: bool = True):
        self.network = network
        self.storage = storage
        self.authority = authority
        self.auto_sync = auto_sync
        self._handlers = {
            "upload": self._upload,
            "fetch": self._fetch,
            "contract-invoke": self._invoke,
            "contract-query": self._query,
            "key-request": self._key_request,
        }

    def route_json(self, text: str) -> str:
        try:
            data = json.loads(text)
        except (ValueError, TypeError):
            return json.dumps(self._error("", RouteError("BadRequest", "not JSON")))
        return json.dumps(self.route(data), sort_keys=True)

    def route(self, msg: "DomainMessage | dict") -> dict:
        """Dispatch one message. Never raises; failures become error responses."""
        cid = ""
        try:
            if not isinstance(msg, DomainMessage):
                cid = msg.get("correlation_id", "") if isinstance(msg, dict) else ""
                msg = DomainMessage.from_dict(msg)
            cid = msg.correlation_id
            handler = self._handlers.get(msg.kind)
            if handler is None:
                raise RouteError("UnknownKind", repr(msg.kind))
            if not self._registered(msg):
                raise RouteError("UnregisteredSender", msg.sender)
            origin, body = handler(msg)
            return {"correlation_id": cid, "ok": True, "origin": origin, "body": body}
        except RouteError as exc:
            return self._error(cid, exc)
        except Exception as exc:  # fuzzed input must not take the router down
            logger.exception("router failure")
            return self._error(cid, RouteError("InternalError", type(exc).__name__))

    @staticmethod
    def _error(cid: Any, exc: RouteError) -> dict:
        resp = {"correlation_id": cid if isinstance(cid, str) else str(cid), "ok": False,
                "origin": exc.origin, "error": {"code": exc.code, "message": exc.message}}
        if isinstance(exc, _ContractFailure):
            resp["body"] = exc.body
        return resp

    def _registered(self, msg: DomainMessage) -> bool:
        if msg.kind == "contract-invoke" and isinstance(msg.body.get("transaction"), dict) \
                and msg.body["transaction"].get("function") == "register":
            return True
        return self.network.call("getUser", {"id": msg.sender}) is not None

    # -- handlers -----------------------------------------------------------

    def _upload(self, msg: DomainMessage) -> tuple[str, dict]:
        body = msg.body
        uri = _field(body, "uri", str)
        payload = b64d(body.get("payload"))
        signature = b64d(body.get("signature"))
        try:
            att = self.storage.upload(msg.sender, uri, payload, bool(body.get("encrypted", False)), signature,
                                      _min_height(body))
        except StorageError as exc:
            raise RouteError(exc.code, str(exc), "storage") from None
        return "storage", to_json_value(att)

    def _fetch(self, msg: DomainMessage) -> tuple[str, dict]:
        body = msg.body
        uri = _field(body, "uri", str)
        try:
            payload = self.storage.fetch(msg.sender, uri, b64d(body.get("nonce")), b64d(body.get("signature")),
                                         _min_height(body))
        except StorageError as exc:
            raise RouteError(exc.code, str(exc), "storage") from None
        return "storage", {"uri": uri, "payload": b64e(payload)}

    def _invoke(self, msg: DomainMessage) -> tuple[str, dict]:
        tx = tx_from_json(msg.body.get("transaction"))
        if tx.invoker != msg.sender:
            raise RouteError("BadRequest", "transaction invoker differs from sender")
        try:
            receipt = self.network.submit(tx)
        except TransactionRejected as exc:
            raise RouteError(exc.code, str(exc), "ledger") from None
        except NetworkStopped as exc:
            raise RouteError(exc.code, str(exc), "ledger") from None
        body = {"tx_id": receipt.tx_id.hex(), "height": receipt.height,
                "result": to_json_value(receipt.result)}
        if not receipt.ok:
            raise _ContractFailure(body, receipt.result)
        return "ledger", body

    def _query(self, msg: DomainMessage) -> tuple[str, dict]:
        function = _field(msg.body, "function", str)
        args = from_json_value(msg.body.get("args") or {})
        if not isinstance(args, dict):
            raise RouteError("BadRequest", "args must be an object")
        try:
            value = self.network.call(function, args)
        except ContractError as exc:
            raise RouteError(exc.code, exc.message, "ledger") from None
        return "ledger", {"value": to_json_value(value)}

    def _key_request(self, msg: DomainMessage) -> tuple[str, dict]:
        if self.authority is None:
            raise RouteError("UnknownKind", "no key authority in this domain")
        body = msg.body
        req = KeyRequest(msg.sender, b64d(body.get("requestor_pk")), _field(body, "prefix", str),
                         b64d(body.get("nonce")), b64d(body.get("signature")),
                         _min_height(body))
        self.network.link("client->authority").transmit(len(req.prefix) + 128)
        try:
            if self.auto_sync:
                self.authority.sync_to_ledger(max(req.min_height, self.network.api_peer.height))
            resp = self.authority.request_key(req)
        except AuthorityError as exc:
            raise RouteError(exc.code, str(exc), "authority") from None
        self.network.link("authority->client").transmit(len(resp.wrapped_key) + 64)
        return "authority", {"prefix": resp.prefix, "wrapped_key": b64e(resp.wrapped_key),
                             "grant_tx_ref": resp.grant_tx_ref.hex(), "height": resp.height}


class _ContractFailure(RouteError):
    """A committed contract call that returned an error result."""

    def __init__(self, body: dict, result: dict):
        super().__init__(result.get("error", "ContractError"), result.get("message", ""), "ledger")
        self.body = body
