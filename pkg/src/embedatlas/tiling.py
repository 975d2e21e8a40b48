"""Layered tile pyramid of representatives via k-means with fixed centroids.

For each layer from coarse to fine, every non-empty tile is clustered with
k total centers, where representatives inherited from coarser layers pin
centers that never move; the remaining free centers are k-means++ seeded and
Lloyd-optimized.  Each center is then mapped back to the nearest actual data
point, so representatives are always real items and never disappear while
zooming in (the cumulative representative set only grows layer by layer).

Determinism: every tile derives its RNG from (rng_seed, layer, ix, iy), so
results are identical regardless of execution order or worker count.

k-means++ draw protocol (mirrored by the reference oracle in the tests):
  - with no centers yet, the first seed is points[rng.integers(m)];
  - otherwise let d2[i] be the squared distance from point i to its nearest
    existing center (fixed + already-chosen seeds); draw r = rng.random() *
    d2.sum() and take the first index where cumsum(d2) > r;
  - seeding stops early if d2 sums to zero (no distinct locations left).
"""

from __future__ import annotations

import hashlib
import shutil
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .model import Representative, Tile, TileKey, tile_indices
from .store import DatasetStore

# Objective increases beyond this are treated as genuine monotonicity
# violations rather than float noise.
_MONOTONE_SLACK = 1e-9


@dataclass
class TilingConfig:
    k: int
    max_iterations: int = 50
    convergence_eps: float = 1e-6
    rng_seed: int = 0
    max_depth_cap: int = 16
    workers: int = 0  # 0 = serial; >1 enables parallel tiles within a layer

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_depth_cap < 1:
            raise ValueError(f"max_depth_cap must be >= 1, got {self.max_depth_cap}")


@dataclass
class KMeansResult:
    free_centers: np.ndarray  # (n_free, 2)
    assignments: np.ndarray  # (m,) index into fixed-then-free center stack
    iterations: int
    converged: bool
    objective_history: list[float] = field(default_factory=list)


@dataclass
class TilePyramid:
    k: int
    depth: int
    depth_capped: bool
    layers: list[dict[TileKey, Tile]]  # index = layer, 0..depth

    @property
    def per_layer_nonempty_tile_counts(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    def digest(self) -> str:
        """SHA-256 of a canonical serialization; equal pyramids hash equal."""
        h = hashlib.sha256()
        h.update(struct.pack("<IIB", self.k, self.depth, self.depth_capped))
        for layer in self.layers:
            for key in sorted(layer):
                tile = layer[key]
                h.update(struct.pack("<III", key.layer, key.ix, key.iy))
                for rep in tile.representatives:
                    h.update(struct.pack("<QffH", rep.id, rep.x, rep.y, rep.introduced_at_layer))
        return h.hexdigest()


def compute_depth(coords: np.ndarray, cfg: TilingConfig) -> tuple[int, bool]:
    """Smallest layer at which every tile holds <= k points, capped.

    Returns (depth, capped); capped means max_depth_cap was hit with some
    tile still over k (coincident points can force this).
    """
    xs, ys = coords[:, 0], coords[:, 1]
    for depth in range(cfg.max_depth_cap + 1):
        ix, iy = tile_indices(xs, ys, depth)
        codes = ix * (1 << depth) + iy
        _, counts = np.unique(codes, return_counts=True)
        if counts.max() <= cfg.k:
            return depth, False
    return cfg.max_depth_cap, True


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(m, c) squared Euclidean distances, textbook per-axis rounding."""
    dx = points[:, 0][:, None] - centers[:, 0][None, :]
    dy = points[:, 1][:, None] - centers[:, 1][None, :]
    return dx * dx + dy * dy


def _kmeans_pp_seeds(
    points: np.ndarray,
    fixed_centers: np.ndarray,
    n_free: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """k-means++ seeding for the free slots, fixed centers pre-placed."""
    m = len(points)
    chosen: list[np.ndarray] = []
    if len(fixed_centers) > 0:
        d2 = _sq_dists(points, fixed_centers).min(axis=1)
    else:
        d2 = None
    for _ in range(n_free):
        if d2 is None:
            idx = int(rng.integers(m))
            d2 = np.full(m, np.inf)
        else:
            total = float(d2.sum())
            if total <= 0.0:
                break  # no distinct locations left to seed
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, m - 1)
        seed = points[idx].copy()
        chosen.append(seed)
        d2 = np.minimum(d2, _sq_dists(points, seed[None, :])[:, 0])
    if not chosen:
        return np.empty((0, 2), dtype=np.float64)
    return np.vstack(chosen)


def constrained_kmeans(
    points: np.ndarray,
    fixed_centers: np.ndarray,
    k_total: int,
    cfg: TilingConfig,
    rng: np.random.Generator | None = None,
) -> KMeansResult:
    """Lloyd's algorithm where fixed centers attract points but never move.

    The assignment step uses all centers (fixed first, then free); the update
    step moves only free centers.  A free center whose cluster empties is
    re-seeded once at the point farthest from all current centers, and frozen
    in place if it empties again.  Iteration stops when the largest free-center
    movement drops below convergence_eps or after max_iterations.

    The total within-cluster squared distance is checked to be non-increasing
    every iteration; a genuine increase raises AssertionError.
    """
    points = np.asarray(points, dtype=np.float64)
    fixed_centers = np.asarray(fixed_centers, dtype=np.float64).reshape(-1, 2)
    m = len(points)
    n_fixed = len(fixed_centers)
    if m == 0:
        raise ValueError("constrained_kmeans requires at least one point")
    if k_total < n_fixed:
        raise ValueError(f"k_total={k_total} < |fixed_centers|={n_fixed} (caller bug)")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)

    if n_fixed > 0:
        coincident = (
            (points[:, 0][:, None] == fixed_centers[:, 0][None, :])
            & (points[:, 1][:, None] == fixed_centers[:, 1][None, :])
        ).any(axis=1)
        n_eligible = int(m - coincident.sum())
    else:
        n_eligible = m
    n_free = max(0, min(k_total - n_fixed, n_eligible))

    free = _kmeans_pp_seeds(points, fixed_centers, n_free, rng)

    if len(free) == 0:
        d2 = _sq_dists(points, fixed_centers)
        assignments = d2.argmin(axis=1).astype(np.int64)
        obj = float(d2[np.arange(m), assignments].sum())
        return KMeansResult(free, assignments, 0, True, [obj])

    reseeded = np.zeros(len(free), dtype=bool)
    frozen = np.zeros(len(free), dtype=bool)
    history: list[float] = []
    assignments = np.zeros(m, dtype=np.int64)
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        centers = np.vstack([fixed_centers, free]) if n_fixed else free
        d2 = _sq_dists(points, centers)
        assignments = d2.argmin(axis=1).astype(np.int64)
        objective = float(d2[np.arange(m), assignments].sum())
        if history and objective > history[-1] + _MONOTONE_SLACK * max(1.0, history[-1]):
            raise AssertionError(
                f"k-means objective increased: {history[-1]!r} -> {objective!r}"
            )
        history.append(objective)

        counts = np.bincount(assignments, minlength=n_fixed + len(free))[n_fixed:]
        new_free = free.copy()
        for j in np.flatnonzero(counts == 0):
            if frozen[j]:
                continue
            if reseeded[j]:
                frozen[j] = True
                continue
            # re-seed at the point farthest from every current center
            all_centers = np.vstack([fixed_centers, new_free]) if n_fixed else new_free
            farthest = int(_sq_dists(points, all_centers).min(axis=1).argmax())
            new_free[j] = points[farthest]
            reseeded[j] = True
        for j in np.flatnonzero(counts > 0):
            if frozen[j]:
                continue
            mask = assignments == n_fixed + j
            new_free[j] = points[mask].mean(axis=0)

        movement = float(np.sqrt(((new_free - free) ** 2).sum(axis=1)).max())
        free = new_free
        if movement < cfg.convergence_eps:
            converged = True
            break

    # final assignment against the final centers
    centers = np.vstack([fixed_centers, free]) if n_fixed else free
    d2 = _sq_dists(points, centers)
    assignments = d2.argmin(axis=1).astype(np.int64)
    final_obj = float(d2[np.arange(m), assignments].sum())
    if history and final_obj > history[-1] + _MONOTONE_SLACK * max(1.0, history[-1]):
        raise AssertionError(
            f"k-means objective increased: {history[-1]!r} -> {final_obj!r}"
        )
    history.append(final_obj)

    return KMeansResult(free, assignments, iterations, converged, history)


def select_representatives(
    point_ids: np.ndarray,
    points: np.ndarray,
    free_centers: np.ndarray,
    inherited_ids: np.ndarray,
) -> np.ndarray:
    """Map free centers to their nearest in-tile points, keep inherited ids.

    point_ids must be sorted ascending so that distance ties resolve to the
    lowest item id.  Duplicates collapse, so the result never exceeds the
    number of centers involved.
    """
    selected = set(int(i) for i in inherited_ids)
    if len(free_centers) > 0:
        nearest = _sq_dists(points, free_centers).argmin(axis=0)
        for local in nearest:
            selected.add(int(point_ids[local]))
    return np.array(sorted(selected), dtype=np.int64)


def _cluster_tile(
    point_ids: np.ndarray,
    pts: np.ndarray,
    inherited_ids: np.ndarray,
    inherited_pos: np.ndarray,
    cfg: TilingConfig,
    tile_seed: tuple[int, ...],
) -> np.ndarray:
    """New representative ids introduced in one tile (excludes inherited)."""
    rng = np.random.default_rng(np.random.SeedSequence(tile_seed))
    res = constrained_kmeans(pts, inherited_pos, cfg.k, cfg, rng=rng)
    reps = select_representatives(point_ids, pts, res.free_centers, inherited_ids)
    return np.setdiff1d(reps, inherited_ids, assume_unique=False)


def build_pyramid(coords: np.ndarray, cfg: TilingConfig) -> TilePyramid:
    """Run the full layer-by-layer representative computation.

    Coordinates are quantized to float32 first (the tile wire precision), so
    stored tiles always agree exactly with in-memory tile membership.
    Within a layer tiles are independent jobs; layers run strictly in order
    because inheritance flows downward.
    """
    coords = np.asarray(coords, dtype=np.float32).astype(np.float64)
    n = len(coords)
    if n == 0:
        raise ValueError("cannot tile an empty point set")
    depth, capped = compute_depth(coords, cfg)
    xs, ys = coords[:, 0], coords[:, 1]

    # introduced[i] = layer at which item i became a representative (-1: not yet)
    introduced = np.full(n, -1, dtype=np.int32)
    layers: list[dict[TileKey, Tile]] = []

    for layer in range(depth):
        groups = _group_by_tile(xs, ys, layer)
        jobs = []
        for key, idx in groups:
            inh_mask = introduced[idx] >= 0
            inherited_ids = idx[inh_mask]
            if len(idx) <= cfg.k:
                # every point becomes a representative; no clustering needed
                new_ids = idx[~inh_mask]
                introduced[new_ids] = layer
            else:
                jobs.append((key, idx, inherited_ids))

        def run(job: tuple[TileKey, np.ndarray, np.ndarray]) -> np.ndarray:
            key, idx, inherited_ids = job
            return _cluster_tile(
                idx,
                coords[idx],
                inherited_ids,
                coords[inherited_ids],
                cfg,
                (cfg.rng_seed, key.layer, key.ix, key.iy),
            )

        if cfg.workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                new_id_sets = list(pool.map(run, jobs))
        else:
            new_id_sets = [run(job) for job in jobs]
        for new_ids in new_id_sets:
            introduced[new_ids] = layer

        layer_tiles: dict[TileKey, Tile] = {}
        for key, idx in groups:
            rep_ids = idx[introduced[idx] >= 0]
            layer_tiles[key] = _make_tile(key, rep_ids, coords, introduced)
        layers.append(layer_tiles)

    # final layer: every item, introduced at its first layer (or depth)
    final_intro = np.where(introduced >= 0, introduced, depth)
    final_tiles: dict[TileKey, Tile] = {}
    for key, idx in _group_by_tile(xs, ys, depth):
        final_tiles[key] = _make_tile(key, idx, coords, final_intro)
    layers.append(final_tiles)

    return TilePyramid(k=cfg.k, depth=depth, depth_capped=capped, layers=layers)


def _group_by_tile(
    xs: np.ndarray, ys: np.ndarray, layer: int
) -> list[tuple[TileKey, np.ndarray]]:
    """Non-empty tiles at `layer` with their member ids, ascending id order."""
    ix, iy = tile_indices(xs, ys, layer)
    codes = ix * (1 << layer) + iy
    order = np.argsort(codes, kind="stable")  # stable keeps ids ascending per tile
    sorted_codes = codes[order]
    boundaries = np.flatnonzero(np.diff(sorted_codes)) + 1
    groups = []
    g = 1 << layer
    for chunk in np.split(order, boundaries):
        code = int(codes[chunk[0]])
        key = TileKey(layer, code // g, code % g)
        groups.append((key, chunk))
    return groups


def _make_tile(
    key: TileKey, rep_ids: np.ndarray, coords: np.ndarray, introduced: np.ndarray
) -> Tile:
    reps = sorted(
        (
            Representative(
                int(i), float(coords[i, 0]), float(coords[i, 1]), int(introduced[i])
            )
            for i in rep_ids
        ),
        key=lambda r: (r.introduced_at_layer, r.id),
    )
    return Tile(key=key, representatives=tuple(reps))


# -- persistence ---------------------------------------------------------


def save_pyramid(store: DatasetStore, pyramid: TilePyramid) -> None:
    """Write the tile files and finalize the manifest's tiling fields."""
    if store.tiles_dir.exists():
        shutil.rmtree(store.tiles_dir)
    for layer_idx, layer in enumerate(pyramid.layers):
        layer_dir = store.tiles_dir / str(layer_idx)
        layer_dir.mkdir(parents=True, exist_ok=True)
        for key, tile in layer.items():
            formats.write_tile(store.tile_path(key), tile)
    manifest = store.manifest
    manifest.k = pyramid.k
    manifest.depth = pyramid.depth
    manifest.depth_capped = pyramid.depth_capped
    manifest.per_layer_nonempty_tile_counts = pyramid.per_layer_nonempty_tile_counts
    store.save_manifest(manifest)


def load_pyramid(store: DatasetStore) -> TilePyramid:
    manifest = store.manifest
    if manifest.depth is None or manifest.k is None:
        raise ValueError(f"{store.root}: no pyramid; run tile first")
    layers = []
    for layer_idx in range(manifest.depth + 1):
        layer_tiles = {}
        for key in store.iter_tile_keys(layer_idx):
            layer_tiles[key] = store.tile(key)
        layers.append(layer_tiles)
    return TilePyramid(
        k=manifest.k,
        depth=manifest.depth,
        depth_capped=manifest.depth_capped,
        layers=layers,
    )


def tile_store(store: DatasetStore, cfg: TilingConfig) -> TilePyramid:
    """Build the pyramid from the store's coordinates and persist it."""
    pyramid = build_pyramid(store.coords(), cfg)
    save_pyramid(store, pyramid)
    return pyramid
