"""Versioned binary container for named float64 tensors.

Layout (little-endian)::

    b"MACVAECK" | u32 version | u32 header_len | header (UTF-8 JSON)
    u32 n_tensors
    per tensor: u32 name_len | name | u8 dtype code (1 = f64) | u32 ndim
                | u64 * ndim shape | row-major payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"MACVAECK"
VERSION = 1
F64 = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict | None = None):
    header_bytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, header_len = struct.unpack_from("<II", data, pos)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype, ndim = struct.unpack_from("<BI", data, pos)
        pos += 5
        if dtype != F64:
            raise DataError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n_bytes // 8, offset=pos).reshape(shape).copy()
        pos += n_bytes
    return tensors, header
