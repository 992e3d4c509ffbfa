"""Reader/writer for the FTNS binary tensor format.

Layout, all little-endian: magic ``b"FTNS"``, u32 version, u32 ndim, ndim x u32
dims, then row-major values.  Version 1 stores float32 (feature files);
version 2 stores float64 and is used for parameter bundles, which must
round-trip bit-exactly.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"
VERSION_F32 = 1
VERSION_F64 = 2
_DTYPES = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(path: str | os.PathLike, array: np.ndarray, version: int = VERSION_F32) -> None:
    if version not in _DTYPES:
        raise FormatError(f"unsupported FTNS version {version}")
    arr = np.asarray(array, dtype=_DTYPES[version])
    header = MAGIC + struct.pack("<II", version, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_header(path: str | os.PathLike) -> tuple[int, tuple[int, ...]]:
    """Return ``(version, shape)`` after validating magic and file size."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not an FTNS file")
        version, ndim = struct.unpack("<II", head[4:])
        if version not in _DTYPES:
            raise FormatError(f"{path}: unsupported FTNS version {version}")
        raw = fh.read(4 * ndim)
        if len(raw) != 4 * ndim:
            raise FormatError(f"{path}: truncated header")
        shape = struct.unpack(f"<{ndim}I", raw)
    expected = 12 + 4 * ndim + int(np.prod(shape, dtype=np.int64)) * _DTYPES[version].itemsize
    if path.stat().st_size != expected:
        raise FormatError(f"{path}: size {path.stat().st_size} does not match header (expected {expected})")
    return version, tuple(shape)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    version, shape = read_header(path)
    offset = 12 + 4 * len(shape)
    data = np.fromfile(path, dtype=_DTYPES[version], offset=offset)
    return data.reshape(shape).astype(_DTYPES[version].newbyteorder("="), copy=False)
