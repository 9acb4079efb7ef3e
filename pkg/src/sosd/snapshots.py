"""Binary weight snapshots.

Layout (all little-endian)::

    offset 0   4 bytes  b"SOSD"
    offset 4   u32      version (1)
    offset 8   u32      rows
    offset 12  u32      cols
    offset 16  f64[rows*cols], row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

from sosd.spectral import as_matrix

__all__ = ["SnapshotFormatError", "decode_snapshot", "encode_snapshot", "read_snapshot", "write_snapshot"]

MAGIC = b"SOSD"
VERSION = 1
HEADER = struct.Struct("<4sIII")


class SnapshotFormatError(ValueError):
    """Malformed snapshot; ``position`` is the byte offset of the first inconsistency."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


def encode_snapshot(M) -> bytes:
    A = as_matrix(M)
    rows, cols = A.shape
    if rows >= 2**32 or cols >= 2**32:
        raise ValueError("matrix too large for the snapshot header")
    payload = np.ascontiguousarray(A, dtype="<f8").tobytes()
    return HEADER.pack(MAGIC, VERSION, rows, cols) + payload


def decode_snapshot(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < HEADER.size:
        for i in range(min(len(data), 4)):
            if data[i] != MAGIC[i]:
                raise SnapshotFormatError("bad magic", i)
        raise SnapshotFormatError(f"truncated header ({len(data)} bytes)", len(data))
    magic, version, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        pos = next(i for i in range(4) if magic[i] != MAGIC[i])
        raise SnapshotFormatError(f"bad magic {magic!r}", pos)
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported version {version}", 4)
    if rows == 0 or cols == 0:
        raise SnapshotFormatError("empty matrix", 8 if rows == 0 else 12)
    expected = HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise SnapshotFormatError(
            f"length {len(data)} does not match {rows}x{cols} payload ({expected} bytes)",
            min(len(data), expected),
        )
    return np.frombuffer(data, dtype="<f8", offset=HEADER.size).reshape(rows, cols).astype(np.float64)


def write_snapshot(path, M) -> None:
    blob = encode_snapshot(M)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_snapshot(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_snapshot(fh.read())
