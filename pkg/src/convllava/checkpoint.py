"""Binary checkpoints of named parameter maps.

Layout (little-endian)::

    b"CVLV"  u32 version  u32 entry_count
    entry*:  u32 name_len  utf-8 name  u8 dtype (0=f32, 1=f64)
             u32 rank  u32 dims[rank]  raw payload

Entries are written in sorted name order so identical maps give identical
bytes.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"CVLV"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def to_bytes(params: Mapping[str, object]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = _as_array(params[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<BI{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def save(params: Mapping[str, object], path) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(params))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def from_bytes(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def need(pos: int, n: int, what: str) -> None:
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what} at byte offset {pos}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (reader knows {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        need(pos, 4, f"name length of entry {i}")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, name_len, f"name of entry {i}")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in out:
            raise CheckpointError(f"{source}: duplicate entry name {name!r}")
        need(pos, 5, f"dtype/rank of entry {name!r}")
        code, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: entry {name!r} has unknown dtype code {code}")
        need(pos, 4 * rank, f"dims of entry {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        nbytes = math.prod(dims) * dt.itemsize
        need(pos, nbytes, f"payload of entry {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=math.prod(dims), offset=pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after {count} entries")
    return out


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))


def load_into(params: Mapping[str, Tensor], path, strict: bool = True) -> None:
    """Copy a checkpoint into existing tensors; nothing changes on mismatch."""
    loaded = load(path)
    problems = []
    for name, arr in loaded.items():
        if name not in params:
            if strict:
                problems.append(f"unexpected entry {name!r}")
            continue
        if params[name].shape != arr.shape:
            problems.append(f"{name!r}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
    if strict:
        problems += [f"missing entry {name!r}" for name in params if name not in loaded]
    if problems:
        raise CheckpointError("; ".join(problems))
    for name, arr in loaded.items():
        if name in params:
            params[name].data = np.ascontiguousarray(arr, dtype=params[name].dtype)


def digest(params: Mapping[str, object]) -> str:
    return hashlib.sha256(to_bytes(params)).hexdigest()
