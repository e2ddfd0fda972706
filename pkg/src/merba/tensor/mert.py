"""MERT binary tensor files.

Layout: ``b"MERT"``, version byte ``0x01``, dtype byte (0 = f32, 1 = f64),
rank byte, ``rank`` little-endian u64 extents, then the row-major
little-endian payload.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MERT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class MertError(ValueError):
    pass


def dumps(array):
    arr = np.asarray(array)
    try:
        code = _CODES[arr.dtype]
    except KeyError:
        raise MertError(f"MERT stores float32/float64 only, got {arr.dtype}") from None
    if arr.ndim > 255:
        raise MertError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf):
    if buf[:4] != MAGIC:
        raise MertError("bad magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise MertError(f"unsupported MERT version {version}")
    if code not in _DTYPES:
        raise MertError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 7)
    offset = 7 + 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * dt.itemsize:
        raise MertError(f"payload is {len(buf) - offset} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
