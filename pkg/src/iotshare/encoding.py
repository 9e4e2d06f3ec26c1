"""Canonical, length-prefixed binary encoding for ledger values.

Every value that feeds a digest or is compared across replicas goes through
:func:`encode`. The decoder is strict: any byte string that would not be
produced by :func:`encode` is rejected, so a decoded value always re-encodes
to the exact input bytes.

Tags::

    N           None
    T / F       True / False
    I <i64>     signed 64-bit big-endian integer
    B <u32> ..  bytes
    S <u32> ..  UTF-8 string
    L <u32> ..  list of encoded values
    D <u32> ..  map: (S-key, value) pairs sorted by key bytes, keys unique
"""
from __future__ import annotations

import hashlib
import struct
from typing import Any

_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")

ZERO_HASH = b"\x00" * 32


class EncodingError(ValueError):
    """Raised for values that cannot be encoded or bytes that do not decode."""


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value: Any, out: bytearray) -> None:
    if value is None:
        out += b"N"
    elif value is True:
        out += b"T"
    elif value is False:
        out += b"F"
    elif isinstance(value, int):
        try:
            out += b"I" + _I64.pack(value)
        except struct.error as exc:
            raise EncodingError(f"integer out of range: {value}") from exc
    elif isinstance(value, (bytes, bytearray, memoryview)):
        data = bytes(value)
        out += b"B" + _U32.pack(len(data)) + data
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out += b"S" + _U32.pack(len(data)) + data
    elif isinstance(value, (list, tuple)):
        out += b"L" + _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        items = []
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodingError(f"map keys must be str, got {type(key).__name__}")
            items.append((key.encode("utf-8"), item))
        items.sort(key=lambda kv: kv[0])
        out += b"D" + _U32.pack(len(items))
        for key_bytes, item in items:
            out += b"S" + _U32.pack(len(key_bytes)) + key_bytes
            _encode_into(item, out)
    else:
        raise EncodingError(f"cannot encode {type(value).__name__}")


def decode(data: bytes) -> Any:
    value, pos = _decode_at(memoryview(bytes(data)), 0)
    if pos != len(data):
        raise EncodingError("trailing bytes after value")
    return value


def _take(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    end = pos + n
    if end > len(buf):
        raise EncodingError("truncated input")
    return bytes(buf[pos:end]), end


def _decode_at(buf: memoryview, pos: int) -> tuple[Any, int]:
    tag, pos = _take(buf, pos, 1)
    if tag == b"N":
        return None, pos
    if tag == b"T":
        return True, pos
    if tag == b"F":
        return False, pos
    if tag == b"I":
        raw, pos = _take(buf, pos, 8)
        return _I64.unpack(raw)[0], pos
    if tag in (b"B", b"S"):
        raw, pos = _take(buf, pos, 4)
        raw, pos = _take(buf, pos, _U32.unpack(raw)[0])
        if tag == b"B":
            return raw, pos
        try:
            return raw.decode("utf-8"), pos
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid UTF-8 in string") from exc
    if tag == b"L":
        raw, pos = _take(buf, pos, 4)
        items = []
        for _ in range(_U32.unpack(raw)[0]):
            item, pos = _decode_at(buf, pos)
            items.append(item)
        return items, pos
    if tag == b"D":
        raw, pos = _take(buf, pos, 4)
        result: dict[str, Any] = {}
        prev: bytes | None = None
        for _ in range(_U32.unpack(raw)[0]):
            key, pos = _decode_at(buf, pos)
            if not isinstance(key, str):
                raise EncodingError("map key is not a string")
            key_bytes = key.encode("utf-8")
            if prev is not None and key_bytes <= prev:
                raise EncodingError("map keys not strictly sorted")
            prev = key_bytes
            result[key], pos = _decode_at(buf, pos)
        return result, pos
    raise EncodingError(f"unknown tag {tag!r}")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_value(value: Any) -> bytes:
    """SHA-256 of the canonical encoding of ``value``."""
    return hashlib.sha256(encode(value)).digest()
