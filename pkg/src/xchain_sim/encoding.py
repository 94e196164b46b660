"""Canonical, deterministic byte encoding for signed protocol data.

Every value is a one-byte tag followed by its body; all lengths and counts are
unsigned 32-bit big-endian.

    0x00  None       (no body)
    0x01  bool       1 byte, 0x00 or 0x01
    0x02  int        u32 length, minimal two's-complement big-endian bytes
    0x03  bytes      u32 length, raw bytes
    0x04  str        u32 length, UTF-8 bytes
    0x05  list       u32 count, then each element encoded in order

Tuples encode as lists. Protocol messages signed by a chain's validators are

    b"XCMSG1" || list[kind: str, crosschain_tx_id: bytes, chain: int, payload: bytes]
"""
from __future__ import annotations

import hashlib
import struct

TAG_NONE = 0x00
TAG_BOOL = 0x01
TAG_INT = 0x02
TAG_BYTES = 0x03
TAG_STR = 0x04
TAG_LIST = 0x05

MESSAGE_MAGIC = b"XCMSG1"

_U32 = struct.Struct(">I")


class EncodingError(ValueError):
    pass


def _int_bytes(v: int) -> bytes:
    if v == 0:
        return b""
    length = (v + (v < 0)).bit_length() // 8 + 1
    return v.to_bytes(length, "big", signed=True)


def _encode_into(value, out: bytearray) -> None:
    # bool before int: bool is an int subclass
    if value is None:
        out.append(TAG_NONE)
    elif isinstance(value, bool):
        out.append(TAG_BOOL)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        body = _int_bytes(value)
        out.append(TAG_INT)
        out += _U32.pack(len(body))
        out += body
    elif isinstance(value, (bytes, bytearray)):
        out.append(TAG_BYTES)
        out += _U32.pack(len(value))
        out += value
    elif isinstance(value, str):
        body = value.encode("utf-8")
        out.append(TAG_STR)
        out += _U32.pack(len(body))
        out += body
    elif isinstance(value, (list, tuple)):
        out.append(TAG_LIST)
        out += _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    else:
        raise EncodingError(f"cannot encode value of type {type(value).__name__}")


def encode(value) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _decode_at(data: bytes, pos: int):
    if pos >= len(data):
        raise EncodingError("truncated input")
    tag = data[pos]
    pos += 1
    if tag == TAG_NONE:
        return None, pos
    if tag == TAG_BOOL:
        if pos >= len(data) or data[pos] not in (0, 1):
            raise EncodingError("bad bool")
        return data[pos] == 1, pos + 1
    if tag == TAG_LIST:
        if pos + 4 > len(data):
            raise EncodingError("truncated count")
        (count,) = _U32.unpack_from(data, pos)
        pos += 4
        items = []
        for _ in range(count):
            item, pos = _decode_at(data, pos)
            items.append(item)
        return items, pos
    if tag not in (TAG_INT, TAG_BYTES, TAG_STR):
        raise EncodingError(f"unknown tag 0x{tag:02x}")
    if pos + 4 > len(data):
        raise EncodingError("truncated length")
    (length,) = _U32.unpack_from(data, pos)
    pos += 4
    body = data[pos:pos + length]
    if len(body) != length:
        raise EncodingError("truncated body")
    pos += length
    if tag == TAG_INT:
        return int.from_bytes(body, "big", signed=True), pos
    if tag == TAG_BYTES:
        return bytes(body), pos
    return body.decode("utf-8"), pos


def decode(data: bytes):
    """Inverse of :func:`encode`; lists come back as Python lists."""
    value, pos = _decode_at(data, 0)
    if pos != len(data):
        raise EncodingError(f"{len(data) - pos} trailing bytes")
    return value


def message_bytes(kind: str, crosschain_tx_id: bytes, chain: int, payload: bytes = b"") -> bytes:
    return MESSAGE_MAGIC + encode([kind, crosschain_tx_id, chain, payload])


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
