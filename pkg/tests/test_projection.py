"""Projection: PCA oracles, normalization arithmetic, degeneracy handling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedatlas import formats
from embedatlas.ingest import ingest_embeddings
from embedatlas.projection import (
    MARGIN,
    ProjectionError,
    load_external_coords,
    normalize_coords,
    pca_coords,
    pca_project,
)
from tests.conftest import write_inputs


def pairwise_dists(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff**2).sum(-1))


class TestNormalizeCoords:
    def test_ten_by_five_box(self):
        # scale (1-2m)/10 = 0.098; y extent 5*0.098 = 0.49, centered
        raw = np.array([[0.0, 0.0], [10.0, 5.0], [5.0, 2.5]])
        out, bounds = normalize_coords(raw)
        assert bounds == (0.0, 0.0, 10.0, 5.0)
        assert out[0] == pytest.approx([0.01, 0.255], abs=1e-12)
        assert out[1] == pytest.approx([0.99, 0.745], abs=1e-12)
        assert out[2] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_single_point_centers(self):
        out, _ = normalize_coords(np.array([[123.4, -9.9]]))
        assert out[0] == pytest.approx([0.5, 0.5], abs=0)

    def test_degenerate_axis_centers(self):
        raw = np.array([[0.0, 7.0], [4.0, 7.0]])
        out, _ = normalize_coords(raw)
        assert out[:, 1] == pytest.approx([0.5, 0.5], abs=0)
        assert out[:, 0] == pytest.approx([MARGIN, 1 - MARGIN], abs=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        raw = rng.standard_normal((30, 2)) * 40 + 3
        once, _ = normalize_coords(raw)
        twice, _ = normalize_coords(once)
        assert np.abs(twice - once).max() <= 1e-12

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_distance_ratios_preserved(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((12, 2)) * rng.uniform(0.1, 100)
        out, _ = normalize_coords(raw)
        d_raw = pairwise_dists(raw)
        d_out = pairwise_dists(out)
        nz = d_raw > 1e-9
        scales = d_out[nz] / d_raw[nz]
        assert scales.max() - scales.min() <= 1e-9 * scales.max()

    def test_non_finite_named_row(self):
        raw = np.zeros((9, 2))
        raw[7, 0] = np.nan
        with pytest.raises(ProjectionError, match="row 7"):
            normalize_coords(raw)


class TestPcaCoords:
    def test_symmetric_four_point_cross(self):
        # (+-1, 0, ...), (0, +-1, 0, ...): lies exactly in a 2D subspace,
        # so projection preserves every pairwise distance
        vectors = np.zeros((4, 6))
        vectors[0, 0], vectors[1, 0] = 1.0, -1.0
        vectors[2, 1], vectors[3, 1] = 1.0, -1.0
        raw, rank = pca_coords(vectors)
        assert rank == 2
        assert np.allclose(pairwise_dists(raw), pairwise_dists(vectors), atol=1e-12)

    def test_identity_on_axis_aligned_2d(self):
        vectors = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        raw, rank = pca_coords(vectors)
        assert rank == 2
        assert np.allclose(raw, vectors, atol=1e-12)

    def test_all_identical_degenerate(self):
        vectors = np.tile([1.5, -2.0, 0.25], (8, 1))
        raw, rank = pca_coords(vectors)
        assert rank == 0
        assert np.all(raw == 0.0)
        out, _ = normalize_coords(raw)
        assert np.all(out == 0.5)

    def test_collinear_degrades_to_rank_one(self):
        rng = np.random.default_rng(2)
        direction = rng.standard_normal(5)
        t = rng.standard_normal(20)
        vectors = np.outer(t, direction) + 7.0
        raw, rank = pca_coords(vectors)
        assert rank == 1
        assert np.all(raw[:, 1] == 0.0)
        # x column still spreads the points out
        assert raw[:, 0].std() > 0

    def test_rotation_invariance_up_to_sign(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((40, 6)) @ np.diag([5, 3, 1, 0.5, 0.2, 0.1])
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a, _ = pca_coords(x)
        b, _ = pca_coords(x @ q.T)
        for col in range(2):
            match_plus = np.allclose(a[:, col], b[:, col], atol=1e-8)
            match_minus = np.allclose(a[:, col], -b[:, col], atol=1e-8)
            assert match_plus or match_minus

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((25, 8))
        a, _ = pca_coords(x)
        b, _ = pca_coords(x.copy())
        assert np.array_equal(a, b)


class TestStoreProjection:
    def _store(self, tmp_path, vectors):
        paths = write_inputs(tmp_path / "in", np.asarray(vectors, dtype=np.float32))
        return ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store").store

    def test_pca_project_store(self, tmp_path):
        rng = np.random.default_rng(8)
        store = self._store(tmp_path, rng.standard_normal((30, 5)))
        result = pca_project(store)
        assert result.method == "pca"
        assert result.coords.shape == (30, 2)
        assert result.coords.min() >= 0.0 and result.coords.max() <= 1.0
        assert len(result.points) == 30
        assert sorted(p.id for p in result.points) == list(range(30))

    def test_external_coords_normalized(self, tmp_path):
        store = self._store(tmp_path, np.eye(2, 3) + 0.5)
        coords_file = tmp_path / "c.aec"
        formats.write_coords(coords_file, np.array([[0, 0], [10, 10]], dtype=np.float32))
        result = load_external_coords(coords_file, store)
        assert result.method == "external"
        assert result.coords[0] == pytest.approx([MARGIN, MARGIN], abs=1e-7)
        assert result.coords[1] == pytest.approx([1 - MARGIN, 1 - MARGIN], abs=1e-7)

    def test_external_count_mismatch(self, tmp_path):
        store = self._store(tmp_path, np.eye(3, 3) + 0.5)
        coords_file = tmp_path / "c.aec"
        formats.write_coords(coords_file, np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ProjectionError, match="mismatch"):
            load_external_coords(coords_file, store)

    def test_external_nan_named_row(self, tmp_path):
        store = self._store(tmp_path, np.eye(9, 4) + 0.5)
        pts = np.ones((9, 2), dtype=np.float32)
        pts[7, 1] = np.nan
        coords_file = tmp_path / "c.aec"
        formats.write_coords(coords_file, pts)
        with pytest.raises(ProjectionError, match="row 7"):
            load_external_coords(coords_file, store)
