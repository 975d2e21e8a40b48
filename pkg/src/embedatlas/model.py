"""Shared data model and tile-grid geometry.

The unit square [0,1]^2 is carved into a power-of-two pyramid: layer ``l``
is a ``2^l x 2^l`` grid of axis-aligned tiles whose side length halves from
one layer to the next.  Layer 0 is a single tile covering the whole square.
Tiles are half-open (``[lo, hi)`` on both axes) except along the outer grid
boundary, where the upper edge is closed so that points with a coordinate of
exactly 1.0 still belong to a tile.

All types here are immutable; the geometry helpers are pure functions, so
everything is safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

# Item identifiers are dense non-negative integers assigned in ingestion
# order; they index directly into the store's vector matrix.
ItemId = int


@dataclass(frozen=True)
class EmbeddingRecord:
    """One item's identity, embedding vector, metadata and optional caption."""

    id: ItemId
    vector: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)
    caption: str | None = None


@dataclass(frozen=True)
class ProjectedPoint:
    """An item's 2D position, normalized to the unit square."""

    id: ItemId
    x: float
    y: float


@dataclass(frozen=True, order=True)
class TileKey:
    """Address of one grid cell: (layer, ix, iy) with 0 <= ix, iy < 2^layer."""

    layer: int
    ix: int
    iy: int

    def __post_init__(self) -> None:
        if self.layer < 0:
            raise ValueError(f"negative layer: {self.layer}")
        g = 1 << self.layer
        if not (0 <= self.ix < g and 0 <= self.iy < g):
            raise ValueError(f"tile indices out of range for layer {self.layer}: ({self.ix},{self.iy})")

    @property
    def grid_size(self) -> int:
        return 1 << self.layer

    @property
    def side(self) -> float:
        # 2^-layer is exact in binary floating point
        return math.ldexp(1.0, -self.layer)

    def bounds(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the tile's area."""
        s = self.side
        return (self.ix * s, self.iy * s, (self.ix + 1) * s, (self.iy + 1) * s)

    def contains(self, x: float, y: float) -> bool:
        """Half-open membership test, closed on the outer grid boundary."""
        x0, y0, x1, y1 = self.bounds()
        g = self.grid_size
        in_x = x0 <= x and (x < x1 or (self.ix == g - 1 and x <= x1))
        in_y = y0 <= y and (y < y1 or (self.iy == g - 1 and y <= y1))
        return in_x and in_y


@dataclass(frozen=True)
class Representative:
    """A dataset point chosen to stand for its neighborhood at some layer."""

    id: ItemId
    x: float
    y: float
    introduced_at_layer: int


@dataclass(frozen=True)
class Tile:
    """Content of one grid cell: every representative inside its area."""

    key: TileKey
    representatives: tuple[Representative, ...]


@dataclass
class AtlasManifest:
    """Global description of a built atlas.

    Fields fill in as pipeline stages run: ingest sets name/count/dimension,
    projection sets method and raw bounds, tiling sets k/depth/tile counts.
    ``depth`` is the all-points layer; ``per_layer_nonempty_tile_counts`` has
    exactly depth+1 entries once tiling has run.
    """

    dataset_name: str
    item_count: int
    dimension: int
    k: int | None = None
    depth: int | None = None
    projection_method: str | None = None  # "pca" | "external"
    bounds_raw: tuple[float, float, float, float] | None = None
    per_layer_nonempty_tile_counts: list[int] | None = None
    depth_capped: bool = False
    projection_rank: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AtlasManifest":
        raw = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        data = {k: v for k, v in raw.items() if k in known}
        if data.get("bounds_raw") is not None:
            data["bounds_raw"] = tuple(data["bounds_raw"])
        return cls(**data)

    def save(self, path: Path) -> None:
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "AtlasManifest":
        return cls.from_json(path.read_text(encoding="utf-8"))


def tile_for_point(x: float, y: float, layer: int) -> TileKey:
    """Tile at `layer` containing (x, y); coordinate 1.0 maps to the last tile.

    Exact: multiplying by 2^layer only shifts the float exponent, so the
    result agrees bit-for-bit with TileKey.contains.
    """
    if layer < 0:
        raise ValueError(f"negative layer: {layer}")
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"point outside unit square: ({x},{y})")
    g = 1 << layer
    ix = min(int(math.floor(x * g)), g - 1)
    iy = min(int(math.floor(y * g)), g - 1)
    return TileKey(layer, ix, iy)


def tile_children(t: TileKey) -> tuple[TileKey, TileKey, TileKey, TileKey]:
    """The four layer+1 tiles whose areas partition t's area."""
    l, x, y = t.layer + 1, t.ix * 2, t.iy * 2
    return (
        TileKey(l, x, y),
        TileKey(l, x + 1, y),
        TileKey(l, x, y + 1),
        TileKey(l, x + 1, y + 1),
    )


def tile_indices(xs: np.ndarray, ys: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized tile_for_point: per-point (ix, iy) arrays at `layer`."""
    if layer < 0:
        raise ValueError(f"negative layer: {layer}")
    g = 1 << layer
    ix = np.minimum(np.floor(xs * g).astype(np.int64), g - 1)
    iy = np.minimum(np.floor(ys * g).astype(np.int64), g - 1)
    return ix, iy
