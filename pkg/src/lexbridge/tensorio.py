"""Binary tensor formats.

Embedding file ("LXB1")::

    magic   4 bytes   b"LXB1"
    rows    uint32    little-endian
    dim     uint32    little-endian
    payload rows*dim  float32, little-endian, row-major

Checkpoint file ("LXCK")::

    magic      4 bytes   b"LXCK"
    length     uint64    byte length of the JSON manifest
    manifest   UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    data       one LXB1 record per tensor, back to back

``offset`` counts from the first byte of the data section. Tensors of rank
other than 2 are stored as a single LXB1 row of their flattened values; the
manifest shape restores them.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

EMBEDDING_MAGIC = b"LXB1"
CHECKPOINT_MAGIC = b"LXCK"
_HEADER = struct.Struct("<4sII")


def encode_matrix(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, dim = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return _HEADER.pack(EMBEDDING_MAGIC, rows, dim) + payload


def decode_matrix(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one LXB1 record starting at ``offset``; return (matrix, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise DataError("truncated LXB1 header")
    magic, rows, dim = _HEADER.unpack_from(buf, offset)
    if magic != EMBEDDING_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    start = offset + _HEADER.size
    end = start + rows * dim * 4
    if end > len(buf):
        raise DataError(f"truncated LXB1 payload: need {rows}x{dim} floats")
    values = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=start)
    return values.reshape(rows, dim).astype(np.float32), end


def save_matrix(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_matrix(matrix))


def load_matrix(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    matrix, end = decode_matrix(buf)
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after LXB1 payload")
    return matrix


def save_checkpoint(path: str | Path, config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    data = io.BytesIO()
    entries = []
    for name, value in tensors.items():
        value = np.asarray(value)
        as_matrix = value if value.ndim == 2 else value.reshape(1, -1)
        record = encode_matrix(as_matrix)
        entries.append({"name": name, "shape": list(value.shape), "offset": data.tell(), "nbytes": len(record)})
        data.write(record)
    manifest = json.dumps({"config": dict(config), "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(data.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not an LXCK checkpoint")
    try:
        (length,) = struct.unpack_from("<Q", buf, 4)
        manifest = json.loads(buf[12 : 12 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint manifest ({exc})") from exc
    base = 12 + length
    view = memoryview(buf)
    tensors = {}
    for entry in manifest["tensors"]:
        matrix, end = decode_matrix(view, base + entry["offset"])
        if end - base - entry["offset"] != entry["nbytes"]:
            raise DataError(f"{path}: tensor {entry['name']} size disagrees with manifest")
        tensors[entry["name"]] = matrix.reshape(entry["shape"])
    return manifest["config"], tensors
