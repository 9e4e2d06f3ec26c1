"""Data-marketplace contract: metadata registration, offers, ACLs and IOUs.

Contract functions run inside :mod:`iotshare.ledger` with a buffered view of
the state; they signal failure by raising :class:`ContractError`, in which
case the ledger discards every write they made.

State keys::

    user<id>           registered identity {id, pk, role}
    attest<uri>        storage attestation {uri, file_id, owner, acl, storage, storage_sig}
    data<file_id hex>  MetaData {id, file_id, owner, uris, acl, sharing_prefix}
    offer<file_id hex> Offer {id, file_id, value, state, seller}
    IOU<pair hex>      IOU account {id, user1, user2, value}

Prices and IOU values are integers in hundredths of a credit unit.
"""
from __future__ import annotations

from decimal import Decimal, InvalidOperation
from typing import Any, Optional

from . import keys
from .encoding import digest_value
from .ledger import Context, ContractError, last_nonce
from .prefix import MalformedIdentity, PrefixIdentity

ROLES = ("user", "storage")


def user_key(id: str) -> str:
    return "user" + id


def attest_key(uri: str) -> str:
    return "attest" + uri


def data_key(file_id: bytes) -> str:
    return "data" + bytes(file_id).hex()


def offer_key(file_id: bytes) -> str:
    return "offer" + bytes(file_id).hex()


def iou_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


def iou_key(a: str, b: str) -> str:
    lo, hi = iou_pair(a, b)
    return "IOU" + digest_value([lo, hi]).hex()


def attestation_payload(uri: str, file_id: bytes, owner: str, acl: list) -> list:
    return ["attest", uri, bytes(file_id), owner, list(acl)]


# --------------------------------------------------------------------------
# Money
# --------------------------------------------------------------------------


def parse_price(text: str) -> int:
    """``"3.00"`` -> 300. At most two decimals; never goes through float."""
    try:
        amount = Decimal(str(text))
    except InvalidOperation:
        raise ValueError(f"not a price: {text!r}") from None
    if not amount.is_finite() or amount != amount.quantize(Decimal("0.01")):
        raise ValueError(f"price needs at most two decimals: {text!r}")
    if amount < 0:
        raise ValueError(f"price cannot be negative: {text!r}")
    return int(amount * 100)


def format_price(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(cents)
    return f"{sign}{cents // 100}.{cents % 100:02d}"


# --------------------------------------------------------------------------
# Argument checking
# --------------------------------------------------------------------------


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ContractError("BadArguments", message)


def _str_list(value: Any) -> bool:
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


def normalize_metadata(mdata: Any) -> dict:
    _require(isinstance(mdata, dict), "metadata must be a map")
    _require(isinstance(mdata.get("file_id"), bytes), "file_id must be bytes")
    _require(isinstance(mdata.get("owner"), str), "owner must be a string")
    _require(_str_list(mdata.get("uris")), "uris must be a list of strings")
    _require(_str_list(mdata.get("acl", [])), "acl must be a list of strings")
    prefix = mdata.get("sharing_prefix")
    _require(prefix is None or isinstance(prefix, str), "sharing_prefix must be a string")
    return {
        "id": mdata.get("id") if isinstance(mdata.get("id"), str) else mdata["file_id"].hex(),
        "file_id": mdata["file_id"],
        "owner": mdata["owner"],
        "uris": list(mdata["uris"]),
        "acl": list(mdata.get("acl", [])),
        "sharing_prefix": prefix,
    }


def _file_id(args: Any) -> bytes:
    _require(isinstance(args, dict) and isinstance(args.get("file_id"), bytes), "file_id must be bytes")
    return args["file_id"]


# --------------------------------------------------------------------------
# Read-only functions (also used by peers to serve queries)
# --------------------------------------------------------------------------


def cloud_acl(state, attestation: dict) -> list:
    """ACL the storage node currently applies to an attested uri.

    The storage node is a ledger peer, so once the file is registered it
    follows the ledger's ACL; before that, the ACL it attested.
    """
    data = state.get(data_key(attestation["file_id"]))
    if data is not None and attestation["uri"] in data["uris"]:
        return data["acl"]
    return attestation["acl"]


def verify_data(state, user: Optional[str], mdata: dict) -> bool:
    """True iff every uri of ``mdata`` has a matching committed attestation."""
    if not mdata["uris"]:
        return False
    for uri in mdata["uris"]:
        att = state.get(attest_key(uri))
        if (att is None
                or att["file_id"] != mdata["file_id"]
                or att["owner"] != mdata["owner"]
                or cloud_acl(state, att) != mdata["acl"]):
            return False
    return True


def get_data(state, file_id: bytes) -> Optional[dict]:
    return state.get(data_key(file_id))


def get_user(state, id: str) -> Optional[dict]:
    return state.get(user_key(id))


def get_attestation(state, uri: str) -> Optional[dict]:
    return state.get(attest_key(uri))


def get_offer(state, file_id: bytes) -> Optional[dict]:
    return state.get(offer_key(file_id))


def list_offers(state, active_only: bool = False) -> list[dict]:
    return [offer for _, offer in state.scan("offer") if offer["state"] or not active_only]


def list_data(state) -> list[dict]:
    return [mdata for _, mdata in state.scan("data")]


def get_iou(state, id_a: str, id_b: str) -> int:
    """Signed balance of the pair; positive means the greater id owes the smaller."""
    if id_a == id_b:
        raise ContractError("SameIdentity", "an IOU needs two distinct identities")
    account = state.get(iou_key(id_a, id_b))
    return 0 if account is None else account["value"]


# --------------------------------------------------------------------------
# Transaction functions
# --------------------------------------------------------------------------


def signer_key(state, tx) -> Optional[bytes]:
    """Public key that must have signed ``tx``.

    An unregistered invoker may only sign its own ``register`` call, with the
    key it is registering.
    """
    user = state.get(user_key(tx.invoker))
    if user is not None:
        return user["pk"]
    args = tx.args
    if tx.function == "register" and isinstance(args, dict) and args.get("id") == tx.invoker:
        pk = args.get("pk")
        return pk if isinstance(pk, bytes) else None
    return None


def register(ctx: Context, args: Any) -> str:
    _require(isinstance(args, dict), "arguments must be a map")
    id, pk, role = args.get("id"), args.get("pk"), args.get("role", "user")
    if not keys.valid_identity_id(id):
        raise ContractError("InvalidIdentity", f"bad identity id {id!r}")
    _require(id == ctx.invoker, "identity must register itself")
    _require(isinstance(pk, bytes) and len(pk) == keys.PUBLIC_KEY_SIZE, "pk must be 32 bytes")
    _require(role in ROLES, f"role must be one of {ROLES}")
    if ctx.state.get(user_key(id)) is not None:
        raise ContractError("AlreadyRegistered", id)
    if role == "storage" and ctx.height != 0:
        raise ContractError("NotPermitted", "storage nodes are admitted at genesis only")
    ctx.state.set(user_key(id), {"id": id, "pk": pk, "role": role})
    return id


def attest(ctx: Context, args: Any) -> str:
    _require(isinstance(args, dict), "arguments must be a map")
    uri, file_id, owner, acl, sig = (args.get(k) for k in ("uri", "file_id", "owner", "acl", "storage_sig"))
    _require(isinstance(uri, str) and uri != "", "uri must be a non-empty string")
    _require(isinstance(file_id, bytes) and isinstance(owner, str) and _str_list(acl), "bad attestation fields")
    _require(isinstance(sig, bytes), "storage_sig must be bytes")
    node = ctx.state.get(user_key(ctx.invoker))
    if node is None or node["role"] != "storage":
        raise ContractError("NotPermitted", "only storage nodes attest")
    if not keys.verify_value(node["pk"], attestation_payload(uri, file_id, owner, acl), sig):
        raise ContractError("BadAttestation", "storage signature does not verify")
    if ctx.state.get(attest_key(uri)) is not None:
        raise ContractError("UriTaken", uri)
    ctx.state.set(attest_key(uri), {
        "uri": uri, "file_id": file_id, "owner": owner, "acl": list(acl),
        "storage": ctx.invoker, "storage_sig": sig,
    })
    return uri


def add_data(ctx: Context, args: Any) -> str:
    _require(isinstance(args, dict), "arguments must be a map")
    mdata = normalize_metadata(args.get("mdata"))
    if ctx.invoker != mdata["owner"]:
        raise ContractError("NotOwner", "only the owner registers data")
    if ctx.state.get(data_key(mdata["file_id"])) is not None:
        raise ContractError("DuplicateData", mdata["file_id"].hex())
    if not verify_data(ctx.state, ctx.invoker, mdata):
        raise ContractError("VerificationFailed", "metadata does not match storage attestations")
    if mdata["sharing_prefix"] is not None:
        try:
            prefix = PrefixIdentity.parse(mdata["sharing_prefix"])
        except MalformedIdentity as exc:
            raise ContractError("InvalidPrefix", str(exc)) from None
        if prefix.root != mdata["owner"]:
            raise ContractError("InvalidPrefix", "sharing prefix must lie in the owner's namespace")
        mdata["sharing_prefix"] = str(prefix)
    mdata["acl"] = [mdata["owner"]]
    ctx.state.set(data_key(mdata["file_id"]), mdata)
    return mdata["file_id"].hex()


def create_offer(ctx: Context, args: Any) -> str:
    file_id = _file_id(args)
    value = args.get("value")
    _require(type(value) is int and value >= 0, "value must be non-negative hundredths")
    mdata = ctx.state.get(data_key(file_id))
    if mdata is None:
        raise ContractError("UnknownData", file_id.hex())
    if ctx.invoker != mdata["owner"]:
        raise ContractError("NotOwner", "only the owner offers data")
    if not verify_data(ctx.state, ctx.invoker, mdata):
        raise ContractError("VerificationFailed", "metadata does not match storage attestations")
    previous = ctx.state.get(offer_key(file_id))
    if previous is not None and previous["state"]:
        raise ContractError("ActiveOfferExists", previous["id"])
    # A fresh id per offer: accepted or revoked offers are never reactivated.
    serial = 1 if previous is None else int(previous["id"].rsplit("#", 1)[1]) + 1
    offer = {"id": f"{file_id.hex()}#{serial}", "file_id": file_id, "value": value,
             "state": True, "seller": mdata["owner"]}
    ctx.state.set(offer_key(file_id), offer)
    return offer["id"]


def revoke_offer(ctx: Context, args: Any) -> str:
    file_id = _file_id(args)
    offer = ctx.state.get(offer_key(file_id))
    if offer is None:
        raise ContractError("UnknownOffer", file_id.hex())
    mdata = ctx.state.get(data_key(file_id))
    if ctx.invoker != mdata["owner"]:
        raise ContractError("NotOwner", "only the owner revokes offers")
    offer["state"] = False
    ctx.state.set(offer_key(file_id), offer)
    return offer["id"]


def accept_offer(ctx: Context, args: Any) -> dict:
    file_id = _file_id(args)
    offer = ctx.state.get(offer_key(file_id))
    if offer is None:
        raise ContractError("UnknownOffer", file_id.hex())
    mdata = ctx.state.get(data_key(file_id))
    user, owner = ctx.invoker, mdata["owner"]
    if user == owner:
        raise ContractError("SelfPurchase", "owners cannot buy their own data")
    if not offer["state"]:
        raise ContractError("InactiveOffer", offer["id"])
    if not verify_data(ctx.state, owner, mdata):
        raise ContractError("VerificationFailed", "metadata does not match storage attestations")
    if user in mdata["acl"]:
        raise ContractError("AlreadyInACL", user)

    offer["state"] = False
    ctx.state.set(offer_key(file_id), offer)

    lo, hi = iou_pair(user, owner)
    key = iou_key(user, owner)
    account = ctx.state.get(key) or {"id": key, "user1": lo, "user2": hi, "value": 0}
    # Positive balance: the greater id (user2) owes the smaller (user1).
    if user > owner:
        account["value"] += offer["value"]
    else:
        account["value"] -= offer["value"]
    ctx.state.set(key, account)

    mdata["acl"] = mdata["acl"] + [user]
    ctx.state.set(data_key(file_id), mdata)
    return {"offer_id": offer["id"], "iou": account["value"]}


FUNCTIONS = {
    "register": register,
    "attest": attest,
    "addData": add_data,
    "createOffer": create_offer,
    "revokeOffer": revoke_offer,
    "acceptOffer": accept_offer,
}


def _q_verify(state, args):
    return verify_data(state, args.get("user"), normalize_metadata(args["mdata"]))


QUERIES = {
    "listOffers": lambda state, args: list_offers(state, bool(args.get("active_only", False))),
    "getIOU": lambda state, args: get_iou(state, args["a"], args["b"]),
    "getData": lambda state, args: get_data(state, args["file_id"]),
    "getUser": lambda state, args: get_user(state, args["id"]),
    "getAttestation": lambda state, args: get_attestation(state, args["uri"]),
    "getOffer": lambda state, args: get_offer(state, args["file_id"]),
    "verifyData": _q_verify,
    "getNonce": lambda state, args: last_nonce(state, args["id"]),
}


def query(state, function: str, args: Optional[dict] = None) -> Any:
    """Run a read-only contract function against ``state``."""
    if function not in QUERIES:
        raise ContractError("UnknownFunction", function)
    try:
        return QUERIES[function](state, args or {})
    except (KeyError, TypeError, AttributeError) as exc:
        raise ContractError("BadArguments", type(exc).__name__) from None
