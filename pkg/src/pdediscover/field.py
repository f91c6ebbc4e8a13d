"""FieldTensor helpers and the PFT1 binary format.

A field tensor is a float64 numpy array of shape ``(n_t, n_c, h, w)``.
Single time steps are handled internally as ``(n_c, h, w)`` arrays.

PFT1 layout (little endian)::

    b"PFT1" | u32 rank (=4) | 4 x u64 dims | n_t*n_c*h*w x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"PFT1"
_HEADER = struct.Struct("<4sI4Q")


def as_field(data, *, name="field") -> np.ndarray:
    """Return ``data`` as a validated rank-4 float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise InvalidArgumentError(f"{name} must be rank 4 (n_t, n_c, h, w), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def encode_pft(field) -> bytes:
    arr = np.ascontiguousarray(as_field(field), dtype="<f8")
    return _HEADER.pack(MAGIC, 4, *arr.shape) + arr.tobytes(order="C")


def decode_pft(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise InvalidArgumentError("buffer too short for a PFT1 header")
    magic, rank, *dims = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise InvalidArgumentError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if rank != 4:
        raise InvalidArgumentError(f"unsupported rank {rank}")
    count = int(np.prod(dims))
    expected = _HEADER.size + 8 * count
    if len(buf) != expected:
        raise InvalidArgumentError(f"PFT1 payload has {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=_HEADER.size)
    return data.astype(np.float64).reshape(dims)


def write_pft(path, field) -> None:
    Path(path).write_bytes(encode_pft(field))


def read_pft(path) -> np.ndarray:
    return decode_pft(Path(path).read_bytes())


def write_matrix_pft(path, matrix) -> None:
    """Store a 2D matrix as a (1, 1, rows, cols) PFT1 tensor."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    write_pft(path, m[None, None])


def read_matrix_pft(path) -> np.ndarray:
    return read_pft(path)[0, 0]

