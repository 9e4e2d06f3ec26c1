"""Prefix encryption over hierarchical identities, with envelope encryption.

A key for identity ``alice/home`` opens any ciphertext produced under
``alice/home`` or a descendant such as ``alice/home/thermostat``; it never
opens ciphertexts for a parent or a sibling.

The default scheme is a key-derivation tree. Key material for an identity is
obtained by walking the labels from the master secret, one keyed hash per
label::

    root      = HMAC(msk, 0x00 || "root")
    k(a)      = HMAC(root, 0x01 || "a")
    k(a/b)    = HMAC(k(a), 0x01 || "b")
    kek(I)    = HMAC(k(I), 0x02 || "kek")

The holder of ``k(P)`` can continue the walk to any descendant of ``P``,
which is exactly the prefix-decryption property. Bulk data is sealed under a
random 32-byte data key with XChaCha20-Poly1305, and the data key is sealed
under ``kek`` of the ciphertext identity.

Unlike a pairing-based HIBE this is not public-key: encryptors must hold key
material for a prefix of the identity they encrypt under (devices are
provisioned by their owner). The master public key is a commitment to the
master secret and is bound into every ciphertext header.

Ciphertext file layout (big-endian)::

    "PFXE" | 0x01 | u16 id_len | identity (UTF-8) | nonce[24]
           | wrapped_dek[48] | u64 payload_len | payload || tag[16]
"""
from __future__ import annotations

import hashlib
import hmac
import os
import re
import struct
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

from nacl.bindings import (
    crypto_aead_xchacha20poly1305_ietf_decrypt,
    crypto_aead_xchacha20poly1305_ietf_encrypt,
)
from nacl.exceptions import CryptoError

MAGIC = b"PFXE"
VERSION = 1
NONCE_SIZE = 24
DEK_SIZE = 32
TAG_SIZE = 16
WRAPPED_DEK_SIZE = DEK_SIZE + TAG_SIZE
MAX_DEPTH = 16
MAX_LABEL_BYTES = 64
MAX_MESSAGE = 64 * 1024 * 1024
SECURITY_PARAMS = {128: 32, 256: 64}

_LABEL_RE = re.compile(r"^[a-z0-9_-]{1,64}$")
_HEAD = struct.Struct(">4sBH")
_LEN = struct.Struct(">Q")


class MalformedIdentity(ValueError):
    pass


class UnsupportedParameter(ValueError):
    pass


class MessageTooLarge(ValueError):
    pass


class Rejected(Exception):
    """Decryption failed. Deliberately carries no reason."""

    def __init__(self) -> None:
        super().__init__("decryption rejected")


@dataclass(frozen=True)
class PrefixIdentity:
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if not 1 <= len(labels) <= MAX_DEPTH:
            raise MalformedIdentity(f"depth must be 1..{MAX_DEPTH}, got {len(labels)}")
        for label in labels:
            if not isinstance(label, str) or not _LABEL_RE.match(label):
                raise MalformedIdentity(f"bad label {label!r}")

    @classmethod
    def parse(cls, text: Union[str, "PrefixIdentity"]) -> "PrefixIdentity":
        if isinstance(text, PrefixIdentity):
            return text
        if not isinstance(text, str):
            raise MalformedIdentity(f"identity must be text, got {type(text).__name__}")
        # "alice/home/" names the same namespace as "alice/home".
        if text.endswith("/"):
            text = text[:-1]
        return cls(tuple(text.split("/")))

    @property
    def depth(self) -> int:
        return len(self.labels)

    @property
    def root(self) -> str:
        return self.labels[0]

    def is_prefix_of(self, other: "PrefixIdentity") -> bool:
        return is_prefix_of(self, other)

    def child(self, label: str) -> "PrefixIdentity":
        return PrefixIdentity(self.labels + (label,))

    def __str__(self) -> str:
        return "/".join(self.labels)


def is_prefix_of(a: PrefixIdentity, b: PrefixIdentity) -> bool:
    """Label-wise leading sub-list test; ``alice/ho`` is not a prefix of ``alice/home``."""
    return len(a.labels) <= len(b.labels) and b.labels[: len(a.labels)] == a.labels


@dataclass(frozen=True)
class MasterKeyPair:
    mpk: bytes
    msk: bytes = field(repr=False)
    security_param: int = 128


@dataclass(frozen=True)
class PrefixKey:
    identity: PrefixIdentity
    key_material: bytes = field(repr=False)
    mpk: bytes = b""


@dataclass(frozen=True)
class EnvelopeCiphertext:
    identity: PrefixIdentity
    nonce: bytes
    wrapped_dek: bytes
    payload: bytes
    tag: bytes

    def header(self) -> bytes:
        ident = str(self.identity).encode("utf-8")
        return _HEAD.pack(MAGIC, VERSION, len(ident)) + ident + self.nonce

    def to_bytes(self) -> bytes:
        return (self.header() + self.wrapped_dek + _LEN.pack(len(self.payload))
                + self.payload + self.tag)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnvelopeCiphertext":
        """Parse the file layout; any structural problem raises :class:`Rejected`."""
        try:
            data = bytes(data)
            magic, version, id_len = _HEAD.unpack_from(data, 0)
            if magic != MAGIC or version != VERSION:
                raise ValueError("bad magic/version")
            pos = _HEAD.size
            identity = PrefixIdentity.parse(data[pos:pos + id_len].decode("utf-8"))
            if str(identity).encode("utf-8") != data[pos:pos + id_len]:
                raise ValueError("non-canonical identity")
            pos += id_len
            nonce = data[pos:pos + NONCE_SIZE]
            pos += NONCE_SIZE
            wrapped = data[pos:pos + WRAPPED_DEK_SIZE]
            pos += WRAPPED_DEK_SIZE
            (length,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            if len(data) - pos != length + TAG_SIZE or len(wrapped) != WRAPPED_DEK_SIZE:
                raise ValueError("length mismatch")
            payload = data[pos:pos + length]
            tag = data[pos + length:]
        except (ValueError, struct.error, UnicodeDecodeError):
            raise Rejected() from None
        return cls(identity, nonce, wrapped, payload, tag)


# --------------------------------------------------------------------------
# Key derivation tree
# --------------------------------------------------------------------------


def _hash_for(key: bytes):
    return hashlib.sha512 if len(key) == 64 else hashlib.sha256


def root_key(msk: bytes) -> bytes:
    return hmac.new(msk, b"\x00root", _hash_for(msk)).digest()


def derive_step(key_material: bytes, label: str) -> bytes:
    """Key material one level below ``key_material``."""
    return hmac.new(key_material, b"\x01" + label.encode("utf-8"), _hash_for(key_material)).digest()


def key_encryption_key(key_material: bytes) -> bytes:
    return hmac.new(key_material, b"\x02kek", _hash_for(key_material)).digest()[:DEK_SIZE]


def master_public_key(msk: bytes) -> bytes:
    return hashlib.sha256(b"iotshare/prefix/mpk\x00" + msk).digest()


class PrefixScheme(Protocol):
    def setup(self, security_param: int = 128, seed: Optional[bytes] = None) -> MasterKeyPair: ...
    def extract(self, msk: bytes, identity) -> PrefixKey: ...
    def encrypt(self, mpk: bytes, identity, message: bytes, key: PrefixKey) -> EnvelopeCiphertext: ...
    def decrypt(self, key: PrefixKey, ct) -> bytes: ...


class KdfTreeScheme:
    """Default :class:`PrefixScheme` built on the derivation tree above."""

    def setup(self, security_param: int = 128, seed: Optional[bytes] = None) -> MasterKeyPair:
        if security_param not in SECURITY_PARAMS:
            raise UnsupportedParameter(f"security parameter must be one of {sorted(SECURITY_PARAMS)}")
        size = SECURITY_PARAMS[security_param]
        if seed is None:
            msk = os.urandom(size)
        else:
            # Test mode only: reproducible master secret.
            msk = hashlib.sha512(b"iotshare/prefix/test-seed\x00" + seed).digest()[:size]
        return MasterKeyPair(master_public_key(msk), msk, security_param)

    def extract(self, msk: bytes, identity) -> PrefixKey:
        identity = PrefixIdentity.parse(identity)
        material = root_key(msk)
        for label in identity.labels:
            material = derive_step(material, label)
        return PrefixKey(identity, material, master_public_key(msk))

    def delegate(self, key: PrefixKey, identity) -> PrefixKey:
        """Continue the derivation from ``key`` down to descendant ``identity``."""
        identity = PrefixIdentity.parse(identity)
        if not key.identity.is_prefix_of(identity):
            raise ValueError(f"{identity} is not below {key.identity}")
        material = key.key_material
        for label in identity.labels[key.identity.depth:]:
            material = derive_step(material, label)
        return PrefixKey(identity, material, key.mpk)

    def encrypt(self, mpk: bytes, identity, message: bytes, key: PrefixKey,
                *, nonce: Optional[bytes] = None, dek: Optional[bytes] = None) -> EnvelopeCiphertext:
        """Seal ``message`` under ``identity``.

        ``key`` is the encryptor's provisioned key and must sit at or above
        ``identity``. ``nonce`` and ``dek`` are for reproducible fixtures only.
        """
        identity = PrefixIdentity.parse(identity)
        if len(message) > MAX_MESSAGE:
            raise MessageTooLarge(f"{len(message)} bytes exceeds {MAX_MESSAGE}")
        if key.mpk != mpk:
            raise ValueError("provisioned key belongs to a different master key")
        nonce = os.urandom(NONCE_SIZE) if nonce is None else nonce
        dek = os.urandom(DEK_SIZE) if dek is None else dek
        if len(nonce) != NONCE_SIZE or len(dek) != DEK_SIZE:
            raise ValueError("bad nonce or data-key size")
        kek = key_encryption_key(self.delegate(key, identity).key_material)
        shell = EnvelopeCiphertext(identity, nonce, b"", b"", b"")
        header = shell.header()
        wrapped = crypto_aead_xchacha20poly1305_ietf_encrypt(dek, header + mpk, nonce, kek)
        sealed = crypto_aead_xchacha20poly1305_ietf_encrypt(
            bytes(message), header + wrapped + _LEN.pack(len(message)), nonce, dek)
        return EnvelopeCiphertext(identity, nonce, wrapped, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])

    def decrypt(self, key: PrefixKey, ct: Union[EnvelopeCiphertext, bytes]) -> bytes:
        if not isinstance(ct, EnvelopeCiphertext):
            ct = EnvelopeCiphertext.from_bytes(ct)
        if not key.identity.is_prefix_of(ct.identity):
            raise Rejected()
        header = ct.header()
        kek = key_encryption_key(self.delegate(key, ct.identity).key_material)
        try:
            dek = crypto_aead_xchacha20poly1305_ietf_decrypt(ct.wrapped_dek, header + key.mpk, ct.nonce, kek)
            return crypto_aead_xchacha20poly1305_ietf_decrypt(
                ct.payload + ct.tag, header + ct.wrapped_dek + _LEN.pack(len(ct.payload)), ct.nonce, dek)
        except (CryptoError, ValueError, TypeError):
            raise Rejected() from None


scheme: PrefixScheme = KdfTreeScheme()


def setup(security_param: int = 128, seed: Optional[bytes] = None) -> MasterKeyPair:
    return scheme.setup(security_param, seed)


def extract(msk: bytes, identity) -> PrefixKey:
    return scheme.extract(msk, identity)


def encrypt(mpk: bytes, identity, message: bytes, key: PrefixKey, **fixture) -> EnvelopeCiphertext:
    return scheme.encrypt(mpk, identity, message, key, **fixture)


def decrypt(key: PrefixKey, ct: Union[EnvelopeCiphertext, bytes]) -> bytes:
    return scheme.decrypt(key, ct)
