"""EMB1 matrix container: little-endian header followed by f32 row-major payload.

Layout::

    b"EMB1" | u32 version=1 | u64 rows | u64 cols | rows*cols f32
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
# refuse headers that would need more than 2**31 floats; protects against garbage extents
_MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """Malformed container. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"EMB1 stores rank-2 matrices, got rank {m.ndim}")
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + m.astype("<f4").tobytes(order="C")


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; return the matrix and the offset after it."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated EMB1 header", len(buf))
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset)
    if version != VERSION:
        raise FormatError(f"unsupported EMB1 version {version}", offset + 4)
    count = rows * cols
    if count > _MAX_ELEMENTS:
        raise FormatError(f"extent overflow: {rows}x{cols}", offset + 8)
    start = offset + _HEADER.size
    end = start + 4 * count
    if end > len(buf):
        raise FormatError(
            f"truncated payload: need {4 * count} bytes for {rows}x{cols}, have {len(buf) - start}",
            len(buf),
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(np.float64).reshape(rows, cols), end


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode(matrix))


def read_matrix(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    matrix, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after EMB1 record", end)
    return matrix
