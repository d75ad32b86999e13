"""Raw Tensor File: ``b"RTF1"``, u8 ndim, ndim little-endian u32 extents,
then the row-major little-endian float32 payload."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"RTF1"


class RTFError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise RTFError("too many dimensions for RTF")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read(fh: BinaryIO, name: str = "<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise RTFError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    nd = fh.read(1)
    if len(nd) != 1:
        raise RTFError(f"{name}: truncated header")
    ndim = nd[0]
    raw = fh.read(4 * ndim)
    if len(raw) != 4 * ndim:
        raise RTFError(f"{name}: truncated header, expected {4 * ndim} bytes of extents")
    shape = struct.unpack(f"<{ndim}I", raw)
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    payload = fh.read(expected)
    if len(payload) != expected:
        raise RTFError(f"{name}: truncated payload, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    return read(io.BytesIO(buf), name)


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as fh:
        return read(fh, str(path))
