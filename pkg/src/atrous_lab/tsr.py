"""TSR1: a tiny bit-exact binary container for dense float arrays.

Layout (all integers little-endian)::

    b"TSR1" | u8 rank | rank x u32 extents | u8 dtype (0=f32, 1=f64) | payload

The payload is the row-major array in little-endian byte order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TSR1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f" and not arr.dtype.isnative:
        arr = arr.astype(arr.dtype.newbyteorder("="))
    if arr.dtype not in _TAGS:
        raise FormatError(f"TSR1 stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    tag = _TAGS[arr.dtype]
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", tag)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise FormatError("truncated header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    rank = buf[4]
    pos = 5
    if len(buf) < pos + 4 * rank + 1:
        raise FormatError(f"truncated extents for rank {rank}", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    tag = buf[pos]
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", offset=pos)
    pos += 1
    dtype = _DTYPES[tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - pos
    if have != expected:
        kind = "truncated" if have < expected else "oversized"
        raise FormatError(
            f"{kind} payload: shape {tuple(shape)} needs {expected} bytes, found {have}",
            offset=pos + min(have, expected),
        )
    arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=pos)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save(path, arr) -> None:
    data = encode(arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode(buf)
    except FormatError as err:
        wrapped = FormatError(f"{path}: {err}")
        wrapped.offset = err.offset
        raise wrapped from None
