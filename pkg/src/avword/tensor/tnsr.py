"""TNSR binary tensor container.

Layout: ``b"TNSR"``, version byte ``0x01``, dtype byte (0=f32, 1=f64, 2=u8),
ndim byte, ``ndim`` little-endian u64 extents, then the row-major
little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_BY_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2}


class TnsrFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise TypeError(f"TNSR supports float32, float64 and uint8, not {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for TNSR")
    header = MAGIC + bytes([VERSION, code, arr.ndim]) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise TnsrFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise TnsrFormatError(f"bad magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise TnsrFormatError(f"unsupported version {buf[4]}", 4)
    code = buf[5]
    if code not in _CODES:
        raise TnsrFormatError(f"unknown dtype code {code}", 5)
    ndim = buf[6]
    end = 7 + 8 * ndim
    if len(buf) < end:
        raise TnsrFormatError("truncated extents", len(buf))
    shape = struct.unpack(f"<{ndim}Q", buf[7:end])
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != expected:
        raise TnsrFormatError(f"payload holds {len(buf) - end} bytes, shape {shape} needs {expected}", end)
    arr = np.frombuffer(buf, dtype=dtype, offset=end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
