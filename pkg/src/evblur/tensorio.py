"""Shared little-endian tensor file format.

Layout: magic ``TNSR``, u32 rank, ``rank`` x u32 dims, then a row-major
float32 little-endian payload. Several tensors may be concatenated in one file.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"TNSR"


class TensorFormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one tensor, or return None at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise TensorFormatError("truncated tensor rank")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise TensorFormatError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(f"payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensors(path: str | Path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for array in arrays:
            write_tensor(fh, array)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (t := read_tensor(fh)) is not None:
            out.append(t)
    return out


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    save_tensors(path, [array])


def load_tensor(path: str | Path) -> np.ndarray:
    tensors = load_tensors(path)
    if not tensors:
        raise TensorFormatError(f"{path}: no tensor found")
    return tensors[0]
