"""Versioned binary checkpoints of named parameters.

Layout (little-endian)::

    magic  b"APCK"      4 bytes
    version            u16
    count              u32
    meta length        u32, then UTF-8 JSON
    per parameter:
        name length    u16, then UTF-8 name
        dtype code     u8   (0 = float32, 1 = float64)
        ndim           u8
        shape          ndim x u32
        data           C-order values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"APCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(IOError):
    pass


def encode_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HII", VERSION, len(state), len(meta_b)), meta_b]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count, mlen = struct.unpack("<HII", take(10, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(mlen, "metadata")).decode())
    state = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"parameter {i} name"))
        name = bytes(take(nlen, f"parameter {i} name")).decode()
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(n * dt.itemsize, f"{name} data"), dtype=dt)
        state[name] = data.reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    return state, meta


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(state, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
