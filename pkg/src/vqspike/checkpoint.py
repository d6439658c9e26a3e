"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes  b"VQSPIKE\\x00"
    version   u32      = 1
    meta_len  u32      length of the UTF-8 metadata block
    meta      bytes    "key=value" lines
    count     u32      number of parameter records
    record*   name_len u32, name UTF-8, ndim u32, dims u32 * ndim, payload f32 LE
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"VQSPIKE\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Dict[str, np.ndarray], meta: Dict[str, str] | None = None) -> bytes:
    meta = meta or {}
    meta_text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_text)), meta_text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(raw: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{source}: truncated checkpoint (need {pos + n} bytes, have {len(raw)})")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(8) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    meta = {}
    for line in take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes")
    return arrays, meta


def save(path, arrays: Dict[str, np.ndarray], meta: Dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(arrays, meta))
    return path


def load(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), str(path))
