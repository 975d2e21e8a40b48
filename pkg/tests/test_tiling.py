"""Pyramid construction: depth, constrained k-means, selection, invariants."""

import itertools

import numpy as np
import pytest

from embedatlas.tiling import (
    TilingConfig,
    build_pyramid,
    compute_depth,
    constrained_kmeans,
    select_representatives,
)
from embedatlas.validate import validate_pyramid
from tests.reference_kmeans import reference_constrained_lloyd


def cfg_with(k: int, seed: int = 0, **kw) -> TilingConfig:
    return TilingConfig(k=k, rng_seed=seed, **kw)


class TestComputeDepth:
    def test_small_dataset_is_depth_zero(self):
        pts = np.random.default_rng(0).random((5, 2))
        assert compute_depth(pts, cfg_with(k=10)) == (0, False)

    def test_two_points_k_one(self):
        pts = np.array([[0.1, 0.1], [0.6, 0.6]])
        assert compute_depth(pts, cfg_with(k=1)) == (1, False)

    def test_coincident_points_hit_cap(self):
        pts = np.array([[0.3, 0.3]] * 4)
        depth, capped = compute_depth(pts, cfg_with(k=1, max_depth_cap=6))
        assert depth == 6 and capped

    def test_depth_is_minimal(self):
        rng = np.random.default_rng(7)
        pts = rng.random((500, 2))
        cfg = cfg_with(k=20)
        depth, _ = compute_depth(pts, cfg)
        # the chosen depth satisfies the bound, depth-1 does not
        from embedatlas.model import tile_indices

        def max_occupancy(layer):
            ix, iy = tile_indices(pts[:, 0], pts[:, 1], layer)
            _, counts = np.unique(ix * (1 << layer) + iy, return_counts=True)
            return counts.max()

        assert max_occupancy(depth) <= 20
        if depth > 0:
            assert max_occupancy(depth - 1) > 20


class TestConstrainedKmeans:
    def test_plain_lloyd_matches_reference(self):
        rng = np.random.default_rng(100)
        for trial in range(25):
            m = int(rng.integers(5, 120))
            k = int(rng.integers(1, 8))
            seed = int(rng.integers(0, 2**31))
            pts = rng.random((m, 2))
            cfg = cfg_with(k=k)
            mine = constrained_kmeans(pts, np.empty((0, 2)), k, cfg,
                                      rng=np.random.default_rng(seed))
            ref_centers, ref_assign, _ = reference_constrained_lloyd(
                pts, np.empty((0, 2)), k, seed
            )
            assert mine.free_centers.shape == ref_centers.shape
            assert np.abs(mine.free_centers - ref_centers).max() <= 1e-9
            assert np.array_equal(mine.assignments, ref_assign)

    def test_with_fixed_matches_reference(self):
        rng = np.random.default_rng(200)
        for trial in range(25):
            m = int(rng.integers(6, 100))
            pts = rng.random((m, 2))
            n_fixed = int(rng.integers(1, 4))
            fixed = pts[rng.choice(m, n_fixed, replace=False)].copy()
            k = n_fixed + int(rng.integers(0, 5))
            seed = int(rng.integers(0, 2**31))
            mine = constrained_kmeans(pts, fixed, k, cfg_with(k=k),
                                      rng=np.random.default_rng(seed))
            ref_centers, ref_assign, _ = reference_constrained_lloyd(pts, fixed, k, seed)
            assert mine.free_centers.shape == ref_centers.shape
            if len(ref_centers):
                assert np.abs(mine.free_centers - ref_centers).max() <= 1e-9
            assert np.array_equal(mine.assignments, ref_assign)

    def test_fixed_centers_bitwise_untouched(self):
        rng = np.random.default_rng(3)
        pts = rng.random((40, 2))
        fixed = pts[:3].copy()
        before = fixed.tobytes()
        constrained_kmeans(pts, fixed, 6, cfg_with(k=6))
        assert fixed.tobytes() == before

    def test_all_slots_fixed_returns_assignments_only(self):
        pts = np.array([[0.1, 0.1], [0.9, 0.9], [0.12, 0.14], [0.88, 0.86]])
        fixed = np.array([[0.1, 0.1], [0.9, 0.9]])
        res = constrained_kmeans(pts, fixed, 2, cfg_with(k=2))
        assert len(res.free_centers) == 0
        assert res.assignments.tolist() == [0, 1, 0, 1]

    def test_k_total_below_fixed_is_contract_violation(self):
        pts = np.random.default_rng(1).random((10, 2))
        with pytest.raises(ValueError, match="k_total"):
            constrained_kmeans(pts, pts[:3], 2, cfg_with(k=2))

    def test_three_triplets_reach_global_optimum(self):
        # 3 tight triplets; one triplet's centroid is pinned; the 2 free
        # centers must land on the other two centroids.  Brute force over all
        # 3^9 assignments certifies the optimum.
        base = np.array([[0.2, 0.2], [0.5, 0.8], [0.8, 0.3]])
        offsets = np.array([[0.0, 0.001], [0.001, -0.001], [-0.001, 0.0]])
        pts = np.concatenate([b + offsets for b in base])
        fixed = pts[0:3].mean(axis=0, keepdims=True)  # triplet A centroid

        best_obj, best_means = None, None
        for labels in itertools.product(range(3), repeat=9):
            labels = np.array(labels)
            obj = 0.0
            means = {}
            ok = True
            for cluster in range(3):
                members = pts[labels == cluster]
                if cluster == 0:
                    center = fixed[0]
                else:
                    if len(members) == 0:
                        continue
                    center = members.mean(axis=0)
                    means[cluster] = center
                if len(members):
                    obj += ((members - center) ** 2).sum()
            if best_obj is None or obj < best_obj - 1e-15:
                best_obj, best_means = obj, means

        expected_free = np.array(sorted(best_means.values(), key=tuple))
        # the optimum puts the free centers on the two other triplet centroids
        assert np.allclose(
            expected_free,
            np.array(sorted([pts[3:6].mean(axis=0), pts[6:9].mean(axis=0)], key=tuple)),
            atol=1e-12,
        )
        for seed in range(64):
            res = constrained_kmeans(pts, fixed, 3, cfg_with(k=3),
                                     rng=np.random.default_rng(seed))
            got = np.array(sorted(res.free_centers, key=tuple))
            assert np.abs(got - expected_free).max() <= 1e-9, f"seed {seed}"

    def test_objective_monotone(self):
        rng = np.random.default_rng(77)
        for _ in range(20):
            pts = rng.random((80, 2))
            fixed = pts[:2].copy()
            res = constrained_kmeans(pts, fixed, 6, cfg_with(k=6),
                                     rng=np.random.default_rng(int(rng.integers(1 << 30))))
            h = res.objective_history
            assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(h, h[1:]))

    def test_coincident_duplicates_stop_seeding_early(self):
        pts = np.array([[0.2, 0.2]] * 5 + [[0.8, 0.8]] * 5)
        res = constrained_kmeans(pts, np.empty((0, 2)), 3, cfg_with(k=3),
                                 rng=np.random.default_rng(0))
        # only two distinct locations exist, so at most 2 free centers emerge
        assert len(res.free_centers) <= 2

    def test_points_on_fixed_centers_reduce_free_slots(self):
        pts = np.array([[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]])
        fixed = pts[:2].copy()
        res = constrained_kmeans(pts, fixed, 4, cfg_with(k=4))
        # only one non-coincident point remains to host free centers
        assert len(res.free_centers) == 1
        assert np.array_equal(res.free_centers[0], pts[2])


class TestSelectRepresentatives:
    def test_center_on_data_point(self):
        ids = np.array([3, 8, 12])
        pts = np.array([[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]])
        reps = select_representatives(ids, pts, np.array([[0.5, 0.5]]), np.array([], dtype=int))
        assert reps.tolist() == [8]

    def test_two_centers_one_point_collapse(self):
        ids = np.array([0, 1])
        pts = np.array([[0.5, 0.5], [10.0, 10.0]])
        centers = np.array([[0.49, 0.5], [0.51, 0.5]])
        reps = select_representatives(ids, pts, centers, np.array([], dtype=int))
        assert reps.tolist() == [0]

    def test_tie_breaks_to_lowest_id(self):
        ids = np.array([4, 9])
        pts = np.array([[0.4, 0.5], [0.6, 0.5]])
        center = np.array([[0.5, 0.5]])
        reps = select_representatives(ids, pts, center, np.array([], dtype=int))
        assert reps.tolist() == [4]

    def test_result_includes_inherited(self):
        ids = np.array([1, 2, 3])
        pts = np.array([[0.1, 0.1], [0.2, 0.2], [0.9, 0.9]])
        reps = select_representatives(ids, pts, np.array([[0.9, 0.9]]), np.array([1, 2]))
        assert reps.tolist() == [1, 2, 3]


class TestBuildPyramid:
    def test_tiny_dataset_single_tile(self):
        rng = np.random.default_rng(0)
        pts = rng.random((5, 2))
        pyr = build_pyramid(pts, cfg_with(k=10))
        assert pyr.depth == 0
        assert pyr.per_layer_nonempty_tile_counts == [1]
        (tile,) = pyr.layers[0].values()
        assert sorted(r.id for r in tile.representatives) == list(range(5))
        assert all(r.introduced_at_layer == 0 for r in tile.representatives)

    def test_400_random_points_pass_validator(self):
        rng = np.random.default_rng(4)
        pts = rng.random((400, 2))
        pyr = build_pyramid(pts, cfg_with(k=25, seed=9))
        assert validate_pyramid(pyr, pts) == []

    def test_clustered_points_pass_validator(self):
        rng = np.random.default_rng(5)
        centers = rng.random((6, 2))
        pts = np.concatenate([c + rng.normal(0, 0.02, (80, 2)) for c in centers])
        pts = np.clip(pts, 0.0, 1.0)
        pyr = build_pyramid(pts, cfg_with(k=12, seed=1))
        assert validate_pyramid(pyr, pts) == []

    def test_deterministic_digest(self):
        rng = np.random.default_rng(6)
        pts = rng.random((300, 2))
        a = build_pyramid(pts, cfg_with(k=9, seed=3))
        b = build_pyramid(pts, cfg_with(k=9, seed=3))
        assert a.digest() == b.digest()
        c = build_pyramid(pts, cfg_with(k=9, seed=4))
        assert c.digest() != a.digest()

    def test_workers_do_not_change_result(self):
        rng = np.random.default_rng(16)
        pts = rng.random((500, 2))
        serial = build_pyramid(pts, cfg_with(k=10, seed=5))
        threaded = build_pyramid(pts, cfg_with(k=10, seed=5, workers=4))
        assert serial.digest() == threaded.digest()

    def test_depth_cap_flag_and_fat_leaves(self):
        pts = np.array([[0.4, 0.4]] * 7 + [[0.6, 0.6]] * 2)
        pyr = build_pyramid(pts, cfg_with(k=2, max_depth_cap=4))
        assert pyr.depth == 4 and pyr.depth_capped
        final = pyr.layers[-1]
        assert max(len(t.representatives) for t in final.values()) == 7
        assert validate_pyramid(pyr, pts) == []

    def test_nesting_and_introduction_annotations(self):
        rng = np.random.default_rng(12)
        pts = rng.random((600, 2))
        pyr = build_pyramid(pts, cfg_with(k=8, seed=2))
        cumulative: set[int] = set()
        for layer_idx, layer in enumerate(pyr.layers):
            members = {r.id for t in layer.values() for r in t.representatives}
            assert cumulative <= members, f"layer {layer_idx} dropped earlier reps"
            if layer_idx < pyr.depth:
                cumulative = members
        assert members == set(range(600))

    def test_depth_growth_smoke(self):
        import math

        for seed in range(3):
            rng = np.random.default_rng(seed)
            pts = rng.random((2000, 2))
            cfg = cfg_with(k=50)
            depth, _ = compute_depth(pts, cfg)
            assert depth <= math.ceil(math.log(2000 / 50, 4)) + 2
