"""Independent invariant checker for built pyramids and stores.

Re-derives, from nothing but the dataset coordinates and grid geometry,
what every tile must contain: which layer introduced each id, where each id
must sit, per-tile caps, inheritance bounds, nesting and final-layer
completeness.  It deliberately shares no clustering code with the builder,
so it doubles as the oracle the builder is tested against.
"""

from __future__ import annotations

import numpy as np

from .model import tile_indices
from .store import DatasetStore
from .tiling import TilePyramid, load_pyramid


def _tile_name(layer: int, code: int) -> str:
    g = 1 << layer
    return f"layer {layer} tile ({code // g},{code % g})"


def validate_pyramid(pyramid: TilePyramid, coords: np.ndarray) -> list[str]:
    """Return a list of violation messages (empty == pyramid is valid)."""
    violations: list[str] = []
    coords = np.asarray(coords, dtype=np.float32).astype(np.float64)
    n = len(coords)
    k, depth = pyramid.k, pyramid.depth

    if len(pyramid.layers) != depth + 1:
        return [f"pyramid has {len(pyramid.layers)} layers, expected depth+1 = {depth + 1}"]

    # first_layer[i] = introduction layer of id i per the tiles' annotations
    first_layer = np.full(n, -1, dtype=np.int64)

    for layer_idx, layer in enumerate(pyramid.layers):
        is_final = layer_idx == depth
        g = 1 << layer_idx

        # stored tile keys must be exactly the point-non-empty tiles
        pix, piy = tile_indices(coords[:, 0], coords[:, 1], layer_idx)
        point_codes = pix * g + piy
        expected_codes = set(int(c) for c in np.unique(point_codes))
        stored_codes = {key.ix * g + key.iy for key in layer}
        for code in sorted(stored_codes - expected_codes):
            violations.append(f"{_tile_name(layer_idx, code)}: stored but contains no dataset points")
        for code in sorted(expected_codes - stored_codes):
            violations.append(f"{_tile_name(layer_idx, code)}: missing from storage")

        ids_parts, xs_parts, ys_parts, intro_parts, code_parts = [], [], [], [], []
        for key in sorted(layer):
            tile = layer[key]
            code = key.ix * g + key.iy
            count = len(tile.representatives)
            if count > k:
                if not is_final:
                    violations.append(
                        f"{_tile_name(layer_idx, code)}: {count} representatives exceed k={k}"
                    )
                elif not pyramid.depth_capped:
                    violations.append(
                        f"{_tile_name(layer_idx, code)}: final layer exceeds k={k} without depth cap"
                    )
            if count == 0:
                violations.append(f"{_tile_name(layer_idx, code)}: stored tile with no representatives")
                continue
            ids_parts.append(np.fromiter((r.id for r in tile.representatives), np.int64, count))
            xs_parts.append(np.fromiter((r.x for r in tile.representatives), np.float64, count))
            ys_parts.append(np.fromiter((r.y for r in tile.representatives), np.float64, count))
            intro_parts.append(
                np.fromiter((r.introduced_at_layer for r in tile.representatives), np.int64, count)
            )
            code_parts.append(np.full(count, code, dtype=np.int64))

        if not ids_parts:
            violations.append(f"layer {layer_idx}: no representatives at all")
            continue
        ids = np.concatenate(ids_parts)
        xs = np.concatenate(xs_parts)
        ys = np.concatenate(ys_parts)
        intro = np.concatenate(intro_parts)
        codes = np.concatenate(code_parts)

        bad = (ids < 0) | (ids >= n)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            violations.append(
                f"{_tile_name(layer_idx, int(codes[j]))}: id {int(ids[j])} is not a dataset point"
            )
            continue  # derived checks below would only cascade

        # stored positions must match the dataset exactly (f32-quantized)
        mismatch = (coords[ids, 0] != xs) | (coords[ids, 1] != ys)
        if mismatch.any():
            j = int(np.flatnonzero(mismatch)[0])
            violations.append(
                f"{_tile_name(layer_idx, int(codes[j]))}: id {int(ids[j])} position "
                f"({xs[j]},{ys[j]}) differs from dataset"
            )

        # each representative must lie in exactly the tile that stores it
        rix, riy = tile_indices(xs, ys, layer_idx)
        outside = (rix * g + riy) != codes
        if outside.any():
            j = int(np.flatnonzero(outside)[0])
            violations.append(
                f"{_tile_name(layer_idx, int(codes[j]))}: id {int(ids[j])} lies outside the tile area"
            )

        late = intro > layer_idx
        if late.any():
            j = int(np.flatnonzero(late)[0])
            violations.append(
                f"{_tile_name(layer_idx, int(codes[j]))}: id {int(ids[j])} introduced at "
                f"{int(intro[j])} > tile layer"
            )

        if len(np.unique(ids)) != len(ids):
            uniq, cnt = np.unique(ids, return_counts=True)
            dup = int(uniq[cnt > 1][0])
            violations.append(f"layer {layer_idx}: id {dup} appears more than once")

        # inheritance bound: inherited members of any tile never exceed k
        inherited = intro < layer_idx
        if inherited.any():
            inh_codes, inh_counts = np.unique(codes[inherited], return_counts=True)
            over = inh_counts > k
            if over.any():
                code = int(inh_codes[over][0])
                violations.append(
                    f"{_tile_name(layer_idx, code)}: {int(inh_counts[over][0])} inherited "
                    f"representatives exceed k={k}"
                )

        # introduction annotations must agree across layers
        prev = first_layer[ids]
        fresh = prev == -1
        first_layer[ids[fresh]] = intro[fresh]
        disagree = ~fresh & (prev != intro)
        if disagree.any():
            j = int(np.flatnonzero(disagree)[0])
            violations.append(
                f"{_tile_name(layer_idx, int(codes[j]))}: id {int(ids[j])} annotated introduced at "
                f"{int(intro[j])}, previously {int(prev[j])}"
            )

        # nesting + completeness: layer members == every id introduced so far
        # (final layer: every id, exactly once)
        if is_final:
            expected_ids = np.arange(n, dtype=np.int64)
        else:
            expected_ids = np.flatnonzero((first_layer >= 0) & (first_layer <= layer_idx))
        got_sorted = np.sort(ids)
        if len(got_sorted) != len(expected_ids) or (got_sorted != expected_ids).any():
            missing = np.setdiff1d(expected_ids, ids)
            extra = np.setdiff1d(ids, expected_ids)
            if len(missing):
                violations.append(
                    f"layer {layer_idx}: ids {missing[:5].tolist()} expected but absent (nesting broken)"
                )
            if len(extra):
                violations.append(f"layer {layer_idx}: ids {extra[:5].tolist()} present unexpectedly")

    return violations


def validate_store(store: DatasetStore, spot_checks: int = 20, rng_seed: int = 0) -> list[str]:
    """Store-level validation: pyramid invariants plus data sanity plus
    brute-force spot checks of the persisted flat index."""
    violations: list[str] = []
    manifest = store.manifest
    n = manifest.item_count

    norm = np.asarray(store.norm_vectors(), dtype=np.float64)
    norms = np.linalg.norm(norm, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        violations.append(f"normalized vectors with non-unit norm at ids {bad[:5].tolist()}")

    if not store.has_projection():
        violations.append("no projection stage output (coords missing)")
        return violations
    coords = store.coords()
    if coords.shape[0] != n:
        violations.append(f"coords rows {coords.shape[0]} != item count {n}")
    if ((coords < 0.0) | (coords > 1.0)).any():
        violations.append("coordinates outside the unit square")

    if manifest.depth is None:
        violations.append("no tiling stage output (manifest depth missing)")
        return violations

    pyramid = load_pyramid(store)
    violations.extend(validate_pyramid(pyramid, coords))

    counts = pyramid.per_layer_nonempty_tile_counts
    if manifest.per_layer_nonempty_tile_counts != counts:
        violations.append(
            f"manifest per-layer tile counts {manifest.per_layer_nonempty_tile_counts} "
            f"!= stored {counts}"
        )

    # flat-index spot checks against a direct dot-product recomputation
    from .vector_index import load_index

    if (store.index_dir / "flat.json").exists():
        index = load_index(store, "flat")
        rng = np.random.default_rng(rng_seed)
        sample = rng.choice(n, size=min(spot_checks, n), replace=False)
        for item in sample:
            got = index.query(norm[item], 5)
            sims = norm @ norm[item]
            order = np.lexsort((np.arange(n), -sims))[: min(5, n)]
            if [e.id for e in got.entries] != [int(i) for i in order]:
                violations.append(f"flat index spot check failed for item {int(item)}")
                break
            if got.entries[0].id != int(item):
                violations.append(f"flat index self-query failed for item {int(item)}")
                break

    return violations
