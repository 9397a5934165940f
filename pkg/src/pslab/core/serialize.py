"""Binary tensor files.

Layout (little-endian): magic ``PSLT``, format version u32, rank u32,
one u32 per dimension, dtype tag u8 (0 = f64, 1 = f32), raw values in
row-major order.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"PSLT"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def tensor_to_bytes(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.dtype not in _DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    tag = _DTYPE_TAGS[arr.dtype]
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    if stream.read(4) != MAGIC:
        raise FormatError("bad magic, not a PSLT tensor")
    try:
        version, rank = struct.unpack("<II", stream.read(8))
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        dims = struct.unpack(f"<{rank}I", stream.read(4 * rank))
        (tag,) = struct.unpack("<B", stream.read(1))
    except struct.error as exc:
        raise FormatError("truncated header") from exc
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = stream.read()
    if len(raw) != count * dtype.itemsize:
        raise FormatError(f"expected {count * dtype.itemsize} data bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
