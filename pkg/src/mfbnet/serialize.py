"""Binary model file.

Layout (all integers little-endian):

    b"MFBW"                     magic
    u8   version (1)
    u32  tensor count
    per tensor:
        u32  name length, then UTF-8 name
        u32  rank, then rank x u64 extents
        float64 little-endian elements, row-major
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import InputError

MAGIC = b"MFBW"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise InputError("not a model file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise InputError("truncated model file")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    version, count = take("<BI")
    if version != VERSION:
        raise InputError(f"unsupported model file version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise InputError("truncated model file")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(view):
            raise InputError("truncated model file")
        tensors[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(view):
        raise InputError("trailing bytes after model tensors")
    return tensors


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
