"""Tiny row-major tensor blobs with a JSON sidecar.

Layout (little-endian)::

    bytes 0..3    magic b"GRAP"
    bytes 4..7    u32 dtype code (1=f64, 2=f32, 3=i64, 4=i32)
    bytes 8..11   u32 rank
    bytes 12..15  u32 reserved (0)
    then          rank x u64 dims, then the data in C order

The sidecar ``<path>.json`` carries ``{"schema": 1, "dtype", "shape"}``
plus free-form metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"GRAP"
HEADER = struct.Struct("<4sIII")
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("<i4")}
CODE_OF = {dt.str: code for code, dt in DTYPE_CODES.items()}
SCHEMA_VERSION = 1


class TensorFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    code = CODE_OF.get(dt.str)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return HEADER.pack(MAGIC, code, arr.ndim, 0) + dims + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER.size:
        raise TensorFormatError("truncated header")
    magic, code, rank, _ = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = HEADER.size + 8 * rank
    if len(blob) < off:
        raise TensorFormatError("truncated dims")
    shape = struct.unpack_from(f"<{rank}Q", blob, HEADER.size)
    dt = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != off + count * dt.itemsize:
        raise TensorFormatError("payload size does not match the header")
    return np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, array, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    path.write_bytes(encode(arr))
    doc = {"schema": SCHEMA_VERSION, "dtype": arr.dtype.name, "shape": list(arr.shape)}
    doc.update(meta or {})
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load(path, with_meta: bool = False):
    path = Path(path)
    arr = decode(path.read_bytes())
    if not with_meta:
        return arr
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if meta and meta.get("schema") != SCHEMA_VERSION:
        raise TensorFormatError(f"unsupported sidecar schema {meta.get('schema')}")
    if meta and list(meta.get("shape", arr.shape)) != list(arr.shape):
        raise TensorFormatError("sidecar shape disagrees with the blob")
    return arr, meta
