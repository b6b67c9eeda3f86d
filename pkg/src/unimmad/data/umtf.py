"""UMTF: a minimal little-endian tensor container.

Layout::

    bytes 0-3   b"UMTF"
    u16         version (1)
    u8          dtype (0 = float32, 1 = float64)
    u8          rank
    u32 * rank  dims
    payload     row-major little-endian scalars
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, IngestionError

MAGIC = b"UMTF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype.newbyteorder("=")) if array.dtype.kind == "f" else None
    if code is None:
        raise FormatError(f"UMTF stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds the UMTF limit of 255")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{source}: {len(buf)} bytes is shorter than the 8-byte UMTF header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported UMTF version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: header truncated, need {end} bytes, have {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - end
    if actual != expected:
        raise FormatError(f"{source}: payload is {actual} bytes, expected {expected} for dims {dims}")
    out = np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_umtf(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(array))


def read_umtf(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"missing tensor file {path}") from exc
    return decode(buf, str(path))
