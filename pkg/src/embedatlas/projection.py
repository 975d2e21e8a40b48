"""2D positions for every item: built-in PCA or externally computed coords.

Both paths produce raw planar coordinates that are then mapped into the unit
square by a single uniform scale + translation (aspect ratio preserved, so
relative distances survive).  External coordinate files let any reduction
tool (UMAP and friends) drive the layout; PCA keeps the pipeline runnable
standalone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .model import ProjectedPoint
from .store import DatasetStore

MARGIN = 0.01  # keeps boundary points strictly inside the outermost tiles

# Relative eigenvalue cutoff below which a component is treated as pure
# numerical noise (true collinearity), not as legitimately small variance.
_RANK_TOL = 1e-12


class ProjectionError(ValueError):
    """Invalid coordinate input."""


@dataclass
class ProjectionResult:
    method: str  # "pca" | "external"
    raw_bounds: tuple[float, float, float, float]
    coords: np.ndarray  # (n, 2) float64, normalized to [0,1]^2
    rank: int = 2  # 2 normal, 1 collinear input, 0 all-identical

    @property
    def points(self) -> list[ProjectedPoint]:
        return [
            ProjectedPoint(i, float(x), float(y))
            for i, (x, y) in enumerate(self.coords)
        ]


def normalize_coords(raw: np.ndarray) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Map raw points into [MARGIN, 1-MARGIN]^2 with one uniform scale.

    The longer raw axis spans exactly 1-2*MARGIN; the shorter axis is
    centered.  A zero-extent axis collapses to 0.5.  Returns the normalized
    points and the raw bounding box (min_x, min_y, max_x, max_y).
    """
    pts = np.asarray(raw, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ProjectionError(f"expected a non-empty (n, 2) array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise ProjectionError(f"non-finite coordinate at row {bad}")

    mins = pts.min(axis=0)
    maxs = pts.max(axis=0)
    extent = maxs - mins
    longest = float(extent.max())
    scale = (1.0 - 2.0 * MARGIN) / longest if longest > 0.0 else 0.0
    offset = (1.0 - extent * scale) / 2.0
    out = (pts - mins) * scale + offset
    bounds = (float(mins[0]), float(mins[1]), float(maxs[0]), float(maxs[1]))
    return out, bounds


def pca_coords(vectors: np.ndarray) -> tuple[np.ndarray, int]:
    """Raw coordinates along the top-2 principal components.

    Component signs are fixed by making each component's largest-magnitude
    loading positive (first index wins ties), so results are deterministic.
    Returns (raw (n,2) coords, rank) where rank < 2 flags degenerate input:
    rank 1 sets y=0 for all points, rank 0 sets both axes to 0.
    """
    mat = np.asarray(vectors, dtype=np.float64)
    n, d = mat.shape
    if n < 2 or d < 2:
        raise ProjectionError(f"PCA needs n >= 2 and D >= 2, got n={n}, D={d}")
    centered = mat - mat.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh returns ascending order; take the top two
    order = np.argsort(eigvals)[::-1]
    top_vals = np.clip(eigvals[order[:2]], 0.0, None)
    top_vecs = eigvecs[:, order[:2]]

    for j in range(2):
        v = top_vecs[:, j]
        if v[np.argmax(np.abs(v))] < 0:
            top_vecs[:, j] = -v

    raw = centered @ top_vecs
    if top_vals[0] <= 0.0:
        rank = 0
        raw[:] = 0.0
    elif top_vals[1] / top_vals[0] < _RANK_TOL:
        rank = 1
        raw[:, 1] = 0.0
    else:
        rank = 2
    return raw, rank


def pca_project(store: DatasetStore) -> ProjectionResult:
    """Project the store's embedding matrix onto its top-2 PCA components."""
    raw, rank = pca_coords(store.vectors())
    coords, bounds = normalize_coords(raw)
    return ProjectionResult(method="pca", raw_bounds=bounds, coords=coords, rank=rank)


def load_external_coords(coords_file: Path, store: DatasetStore) -> ProjectionResult:
    """Adopt externally computed 2D coordinates (AEC1 file) verbatim.

    The file must hold exactly one finite (x, y) pair per item; otherwise the
    whole file is rejected (no partial result).
    """
    raw = formats.read_coords(Path(coords_file))
    n = store.item_count
    if raw.shape[0] != n:
        raise ProjectionError(
            f"coordinate count mismatch: file has {raw.shape[0]} pairs, store has {n} items"
        )
    coords, bounds = normalize_coords(raw)
    return ProjectionResult(method="external", raw_bounds=bounds, coords=coords, rank=2)


def apply_projection(store: DatasetStore, result: ProjectionResult) -> None:
    """Persist a projection into the store (coords file + manifest fields)."""
    store.save_coords(result.coords)
    manifest = store.manifest
    manifest.projection_method = result.method
    manifest.bounds_raw = result.raw_bounds
    manifest.projection_rank = result.rank
    store.save_manifest(manifest)
