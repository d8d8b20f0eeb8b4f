"""Binary matrix and container formats used for feature files and model persistence.

Matrix format (``FMX1``):
    magic ``FMX1`` | u64 n | u64 p | n*p little-endian f64, row-major

Container format (``FMC1``):
    magic ``FMC1`` | u64 section count | sections

    Each section is ``u64 name length | name (UTF-8) | u64 payload length |
    payload bytes``. Section payloads are opaque; matrices are stored as
    embedded FMX1 blobs, scalars and strings as canonical JSON. Writers emit
    sections in insertion order, so a given in-memory object always produces
    identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

FMX_MAGIC = b"FMX1"
CONTAINER_MAGIC = b"FMC1"

_HEADER = struct.Struct("<4sQQ")
_U64 = struct.Struct("<Q")


def matrix_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize a 1-D or 2-D array as an FMX1 blob (1-D becomes one row)."""
    a = np.ascontiguousarray(np.atleast_2d(np.asarray(arr, dtype=np.float64)))
    if a.ndim != 2:
        raise FormatError(f"expected a 1-D or 2-D array, got ndim={np.asarray(arr).ndim}")
    n, p = a.shape
    return _HEADER.pack(FMX_MAGIC, n, p) + a.astype("<f8").tobytes(order="C")


def matrix_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("matrix blob shorter than the FMX1 header")
    magic, n, p = _HEADER.unpack_from(blob)
    if magic != FMX_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    expected = _HEADER.size + n * p * 8
    if len(blob) < expected:
        raise FormatError(f"truncated matrix payload: need {expected} bytes, have {len(blob)}")
    if len(blob) > expected:
        raise FormatError(f"trailing data after matrix payload: {len(blob) - expected} bytes")
    data = np.frombuffer(blob, dtype="<f8", count=n * p, offset=_HEADER.size)
    return data.astype(np.float64).reshape(n, p)


def write_matrix(path: Path | str, arr: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(arr))


def read_matrix(path: Path | str) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def container_to_bytes(sections: dict[str, bytes]) -> bytes:
    parts = [CONTAINER_MAGIC, _U64.pack(len(sections))]
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        parts.append(_U64.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U64.pack(len(payload)))
        parts.append(payload)
    return b"".join(parts)


def container_from_bytes(blob: bytes) -> dict[str, bytes]:
    if len(blob) < 12 or blob[:4] != CONTAINER_MAGIC:
        raise FormatError("not a section container")
    (count,) = _U64.unpack_from(blob, 4)
    sections: dict[str, bytes] = {}
    offset = 12
    for _ in range(count):
        try:
            (name_len,) = _U64.unpack_from(blob, offset)
            offset += 8
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (payload_len,) = _U64.unpack_from(blob, offset)
            offset += 8
            payload = blob[offset : offset + payload_len]
            if len(payload) != payload_len:
                raise FormatError(f"truncated payload for section {name!r}")
            offset += payload_len
        except struct.error as exc:
            raise FormatError("truncated container") from exc
        sections[name] = payload
    if offset != len(blob):
        raise FormatError(f"trailing data after last section: {len(blob) - offset} bytes")
    return sections


def write_container(path: Path | str, sections: dict[str, bytes]) -> None:
    Path(path).write_bytes(container_to_bytes(sections))


def read_container(path: Path | str) -> dict[str, bytes]:
    return container_from_bytes(Path(path).read_bytes())


def meta_to_bytes(meta: dict) -> bytes:
    """Canonical JSON for scalar sections; stable across runs by construction."""
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def meta_from_bytes(blob: bytes) -> dict:
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("malformed meta section") from exc
