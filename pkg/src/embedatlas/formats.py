"""Binary file codecs shared by the pipeline stages.

Vector file ("AEV1"):
    magic "AEV1" (4 bytes) | version u32 | n u64 | D u32,
    then n*D float32 little-endian, row-major.

2D coordinates file ("AEC1"):
    magic "AEC1" (4 bytes) | n u64, then n pairs of float32 (x_raw, y_raw).

Tile record (one file per non-empty tile):
    count u32, then per representative: id u64 | x f32 | y f32 |
    introduced_at_layer u16.

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Representative, Tile, TileKey

VECTOR_MAGIC = b"AEV1"
COORDS_MAGIC = b"AEC1"
VECTOR_VERSION = 1

_VEC_HEADER = struct.Struct("<4sIQI")  # magic, version, n, D
_COORD_HEADER = struct.Struct("<4sQ")  # magic, n
_TILE_COUNT = struct.Struct("<I")
_TILE_REP = struct.Struct("<QffH")


class FormatError(ValueError):
    """Malformed or inconsistent binary input."""


def write_vectors(path: Path, vectors: np.ndarray, version: int = VECTOR_VERSION) -> None:
    """Write an (n, D) float32 matrix as an AEV1 file."""
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"vector matrix must be 2D, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_VEC_HEADER.pack(VECTOR_MAGIC, version, n, d))
        fh.write(arr.tobytes())


def read_vectors(path: Path) -> tuple[np.ndarray, int]:
    """Read an AEV1 file; returns ((n, D) float32 matrix, version).

    The payload length must match the header exactly.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _VEC_HEADER.size:
        raise FormatError(f"{path}: file shorter than AEV1 header")
    magic, version, n, d = _VEC_HEADER.unpack_from(raw)
    if magic != VECTOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VECTOR_MAGIC!r}")
    if d == 0:
        raise FormatError(f"{path}: zero dimension")
    expected = _VEC_HEADER.size + n * d * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch: header says n={n}, D={d} "
            f"({expected} bytes total), file has {len(raw)} bytes"
        )
    mat = np.frombuffer(raw, dtype="<f4", offset=_VEC_HEADER.size).reshape(n, d)
    return mat.copy(), version


def write_coords(path: Path, coords: np.ndarray) -> None:
    """Write an (n, 2) float32 matrix as an AEC1 coordinates file."""
    arr = np.ascontiguousarray(coords, dtype="<f4")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FormatError(f"coords must be (n, 2), got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_COORD_HEADER.pack(COORDS_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes())


def read_coords(path: Path) -> np.ndarray:
    """Read an AEC1 file into an (n, 2) float64 matrix."""
    raw = Path(path).read_bytes()
    if len(raw) < _COORD_HEADER.size:
        raise FormatError(f"{path}: file shorter than AEC1 header")
    magic, n = _COORD_HEADER.unpack_from(raw)
    if magic != COORDS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {COORDS_MAGIC!r}")
    expected = _COORD_HEADER.size + n * 8
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch: header says n={n} "
            f"({expected} bytes total), file has {len(raw)} bytes"
        )
    mat = np.frombuffer(raw, dtype="<f4", offset=_COORD_HEADER.size).reshape(n, 2)
    return mat.astype(np.float64)


def write_tile(path: Path, tile: Tile) -> None:
    parts = [_TILE_COUNT.pack(len(tile.representatives))]
    for rep in tile.representatives:
        parts.append(_TILE_REP.pack(rep.id, rep.x, rep.y, rep.introduced_at_layer))
    Path(path).write_bytes(b"".join(parts))


def read_tile(path: Path, key: TileKey) -> Tile:
    raw = Path(path).read_bytes()
    if len(raw) < _TILE_COUNT.size:
        raise FormatError(f"{path}: truncated tile record")
    (count,) = _TILE_COUNT.unpack_from(raw)
    expected = _TILE_COUNT.size + count * _TILE_REP.size
    if len(raw) != expected:
        raise FormatError(f"{path}: tile record length mismatch")
    reps = []
    off = _TILE_COUNT.size
    for _ in range(count):
        item_id, x, y, introduced = _TILE_REP.unpack_from(raw, off)
        off += _TILE_REP.size
        reps.append(Representative(int(item_id), float(x), float(y), int(introduced)))
    return Tile(key=key, representatives=tuple(reps))
