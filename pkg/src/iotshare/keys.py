"""Ed25519 identities: signing keys, verification, and key-file helpers."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from nacl.exceptions import BadSignatureError
from nacl.signing import SigningKey, VerifyKey

from .encoding import encode

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64

# User ids double as the root label of their prefix namespace.
_ID_RE = re.compile(r"^[a-z0-9_-]{1,64}$")


def valid_identity_id(value: Any) -> bool:
    return isinstance(value, str) and bool(_ID_RE.match(value))


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != PUBLIC_KEY_SIZE or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        VerifyKey(bytes(public_key)).verify(bytes(message), bytes(signature))
    except (BadSignatureError, ValueError, TypeError):
        return False
    return True


def verify_value(public_key: bytes, value: Any, signature: bytes) -> bool:
    return verify(public_key, encode(value), signature)


@dataclass
class Identity:
    """A named key holder that signs canonical values."""

    id: str
    signing_key: SigningKey = field(repr=False)

    @classmethod
    def generate(cls, id: str) -> "Identity":
        return cls(id, SigningKey.generate())

    @classmethod
    def from_seed(cls, id: str, seed: bytes) -> "Identity":
        return cls(id, SigningKey(seed))

    @property
    def public_key(self) -> bytes:
        return bytes(self.signing_key.verify_key)

    @property
    def seed(self) -> bytes:
        return bytes(self.signing_key)

    def sign(self, message: bytes) -> bytes:
        return self.signing_key.sign(message).signature

    def sign_value(self, value: Any) -> bytes:
        return self.sign(encode(value))

    def save(self, path: Path) -> None:
        path.write_text(f"{self.id}\n{self.seed.hex()}\n")
        path.chmod(0o600)

    @classmethod
    def load(cls, path: Path) -> "Identity":
        id, seed_hex = path.read_text().split()
        return cls.from_seed(id, bytes.fromhex(seed_hex))
