"""Binary array container ("PGT1") shared by heatmaps and dataset samples.

Layout: magic ``b"PGT1"``, u8 version, u8 dtype code (1 = float32 LE,
2 = uint8 boolean), u32 LE rank, ``rank`` u32 LE dims, row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedError, VersionError

MAGIC = b"PGT1"
VERSION = 1
DTYPE_F32 = 1
DTYPE_BOOL = 2

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_BOOL: np.dtype("u1")}


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        code = DTYPE_BOOL
        payload = arr.astype("u1")
    else:
        code = DTYPE_F32
        payload = arr.astype("<f4")
    head = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(payload).tobytes()


def decode_array(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic bytes {buf[:4]!r}")
    if len(buf) < 10:
        raise TruncatedError(f"{name}: header truncated")
    version, code, rank = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise VersionError(f"{name}: unsupported version {version} (expected {VERSION})")
    if code not in _DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    off = 10
    if len(buf) < off + 4 * rank:
        raise TruncatedError(f"{name}: dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = count * dtype.itemsize
    if len(buf) - off < need:
        raise TruncatedError(f"{name}: payload has {len(buf) - off} bytes, expected {need}")
    if len(buf) - off > need:
        raise FormatError(f"{name}: {len(buf) - off - need} trailing bytes")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    if code == DTYPE_BOOL:
        return arr.astype(bool)
    return arr.astype(np.float32)


def write_array(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(arr))


def read_array(path) -> np.ndarray:
    path = Path(path)
    return decode_array(path.read_bytes(), name=str(path))
