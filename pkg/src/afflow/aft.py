"""AFT1 tensor file format.

Layout: magic ``AFT1``, little-endian u32 ndim, ndim little-endian u32
extents, then the row-major little-endian f64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFT1"


def write_aft(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(encode_aft(arr))


def encode_aft(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def read_aft(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, rest = decode_aft(data)
    if rest:
        raise ValueError(f"{path}: {len(rest)} trailing bytes after tensor payload")
    return arr


def decode_aft(data: bytes) -> tuple[np.ndarray, bytes]:
    """Parse one AFT1 tensor from the front of ``data``; return it and the tail."""
    if data[:4] != MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = offset + 8 * count
    if len(data) < end:
        raise ValueError(f"truncated tensor: need {end} bytes, have {len(data)}")
    arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
    return arr, data[end:]
