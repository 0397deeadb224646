"""Relational value model and the canonical binary codec.

Cells are plain Python scalars (int, float, str, bool, None) plus the
Timestamp wrapper for the engine's logical clock. Function outputs may
additionally be flat lists of scalars. The binary codec is self-describing
(one tag byte, length-prefixed payloads) and stable across runs, so encoded
outputs can be compared byte-for-byte and persisted as recorded results.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

# Variant tags, also the codec's on-wire tag bytes.
NULL = 0
INT64 = 1
FLOAT64 = 2
TEXT = 3
BOOL = 4
TIMESTAMP = 5
LIST = 6

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


@dataclass(frozen=True, order=True)
class Timestamp:
    """Logical microseconds since engine start; monotone with commit order."""

    micros: int


Value = object  # int | float | str | bool | None | Timestamp (+ list for outputs)


def kind_of(value) -> int:
    if value is None:
        return NULL
    if isinstance(value, bool):  # bool before int: bool is an int subclass
        return BOOL
    if isinstance(value, int):
        return INT64
    if isinstance(value, float):
        return FLOAT64
    if isinstance(value, str):
        return TEXT
    if isinstance(value, Timestamp):
        return TIMESTAMP
    if isinstance(value, (list, tuple)):
        return LIST
    raise TypeError(f"unsupported value type: {type(value).__name__}")


def check_scalar(value) -> None:
    """Validate a single table cell (lists are not storable in tables)."""
    kind = kind_of(value)
    if kind == LIST:
        raise TypeError("lists are not valid table cell values")
    if kind == INT64 and not _INT64_MIN <= value <= _INT64_MAX:
        raise ValueError(f"integer out of 64-bit range: {value}")


def values_equal(a, b) -> bool:
    """Predicate equality: defined only between identical variants.

    Null never matches a predicate, not even another Null.
    """
    ka, kb = kind_of(a), kind_of(b)
    if ka == NULL or kb == NULL:
        return False
    if ka != kb:
        return False
    return a == b


def sort_key(value):
    """Total order usable across variants (variant tag breaks ties)."""
    kind = kind_of(value)
    if kind == NULL:
        return (kind, 0)
    if kind == TIMESTAMP:
        return (kind, value.micros)
    if kind == BOOL:
        return (kind, int(value))
    return (kind, value)


# --- canonical binary codec ---


def encode_value(value) -> bytes:
    kind = kind_of(value)
    if kind == NULL:
        return bytes([NULL])
    if kind == BOOL:
        return bytes([BOOL, 1 if value else 0])
    if kind == INT64:
        return bytes([INT64]) + struct.pack(">q", value)
    if kind == FLOAT64:
        return bytes([FLOAT64]) + struct.pack(">d", value)
    if kind == TEXT:
        raw = value.encode("utf-8")
        return bytes([TEXT]) + struct.pack(">I", len(raw)) + raw
    if kind == TIMESTAMP:
        return bytes([TIMESTAMP]) + struct.pack(">q", value.micros)
    parts = [bytes([LIST]), struct.pack(">I", len(value))]
    parts.extend(encode_value(item) for item in value)
    return b"".join(parts)


def _decode_value(buf: bytes, pos: int):
    tag = buf[pos]
    pos += 1
    if tag == NULL:
        return None, pos
    if tag == BOOL:
        return buf[pos] == 1, pos + 1
    if tag == INT64:
        return struct.unpack_from(">q", buf, pos)[0], pos + 8
    if tag == FLOAT64:
        return struct.unpack_from(">d", buf, pos)[0], pos + 8
    if tag == TEXT:
        (length,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        return buf[pos : pos + length].decode("utf-8"), pos + length
    if tag == TIMESTAMP:
        return Timestamp(struct.unpack_from(">q", buf, pos)[0]), pos + 8
    if tag == LIST:
        (count,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        items = []
        for _ in range(count):
            item, pos = _decode_value(buf, pos)
            items.append(item)
        return items, pos
    raise ValueError(f"bad value tag {tag}")


def decode_value(buf: bytes):
    value, pos = _decode_value(buf, 0)
    if pos != len(buf):
        raise ValueError("trailing bytes after value")
    return value


def encode_named(values: dict) -> bytes:
    """Encode a name->value mapping; keys sorted so the encoding is canonical."""
    parts = [struct.pack(">I", len(values))]
    for name in sorted(values):
        raw = name.encode("utf-8")
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
        parts.append(encode_value(values[name]))
    return b"".join(parts)


def decode_named(buf: bytes, pos: int = 0):
    (count,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (length,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        name = buf[pos : pos + length].decode("utf-8")
        pos += length
        value, pos = _decode_value(buf, pos)
        out[name] = value
    return out, pos


# --- JSON wire representation (tagged, variant-faithful) ---


def to_wire(value):
    kind = kind_of(value)
    if kind == NULL:
        return None
    if kind == BOOL:
        return {"b": value}
    if kind == INT64:
        return {"i": value}
    if kind == FLOAT64:
        return {"f": value}
    if kind == TEXT:
        return {"s": value}
    if kind == TIMESTAMP:
        return {"ts": value.micros}
    return {"l": [to_wire(item) for item in value]}


def from_wire(obj):
    if obj is None:
        return None
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ValueError(f"bad wire value: {obj!r}")
    tag, payload = next(iter(obj.items()))
    if tag == "b":
        return bool(payload)
    if tag == "i":
        return int(payload)
    if tag == "f":
        return float(payload)
    if tag == "s":
        return str(payload)
    if tag == "ts":
        return Timestamp(int(payload))
    if tag == "l":
        return [from_wire(item) for item in payload]
    raise ValueError(f"bad wire tag: {tag!r}")


def stable_hash(value) -> int:
    """Deterministic 32-bit hash (process-independent, unlike hash())."""
    return zlib.crc32(encode_value(value))
