"""FTZ binary tensor files.

Layout: the magic ``b"FTZ1"``, one unsigned byte holding the rank, ``rank``
little-endian uint32 dimensions, then the row-major little-endian float32 payload.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTZ1"
_PAYLOAD = np.dtype("<f4")


class FTZFormatError(ValueError):
    """Raised for truncated, oversized or otherwise malformed FTZ data."""


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise ValueError(f"FTZ supports rank <= 255, got {arr.ndim}")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_PAYLOAD).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FTZFormatError("missing FTZ1 magic")
    if len(buf) < 5:
        raise FTZFormatError("truncated header: no rank byte")
    rank = buf[4]
    offset = 5 + 4 * rank
    if len(buf) < offset:
        raise FTZFormatError(f"truncated header: rank {rank} needs {offset} bytes, got {len(buf)}")
    shape = struct.unpack_from(f"<{rank}I", buf, 5)
    expected = offset + 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) != expected:
        raise FTZFormatError(f"payload size mismatch for shape {shape}: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=_PAYLOAD, offset=offset).reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
