"""Shared fixtures: synthetic input files and fully built stores."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from embedatlas import formats
from embedatlas.ingest import ingest_embeddings
from embedatlas.projection import apply_projection, pca_project
from embedatlas.search import MockEmbedder
from embedatlas.store import DatasetStore
from embedatlas.tiling import TilingConfig, tile_store
from embedatlas.vector_index import build_index


def write_inputs(
    directory: Path,
    vectors: np.ndarray,
    filenames: list[str] | None = None,
    labels: list[str] | None = None,
    captions: dict[int, str] | None = None,
) -> dict[str, Path]:
    """Write AEV1 + metadata (+ captions) input files for ingest."""
    directory.mkdir(parents=True, exist_ok=True)
    n = len(vectors)
    paths = {"vectors": directory / "input.aev", "meta": directory / "input.meta"}
    formats.write_vectors(paths["vectors"], np.asarray(vectors, dtype=np.float32))
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        for i in range(n):
            fields = [f"filename:{filenames[i] if filenames else f'img_{i:05d}.png'}"]
            if labels:
                fields.append(f"label:{labels[i]}")
            fh.write("\t".join(fields) + "\n")
    if captions is not None:
        paths["captions"] = directory / "input.captions"
        with open(paths["captions"], "w", encoding="utf-8") as fh:
            for item_id in sorted(captions):
                fh.write(f"{item_id}\t{captions[item_id]}\n")
    return paths


def build_full_store(
    root: Path,
    vectors: np.ndarray,
    k: int = 5,
    seed: int = 0,
    captions: dict[int, str] | None = None,
    images_dir: Path | None = None,
    index_kinds: tuple[str, ...] = ("flat",),
    name: str | None = None,
) -> DatasetStore:
    """Run the whole pipeline (ingest, project, tile, index) into `root`."""
    inputs = write_inputs(root.parent / f"{root.name}_inputs", np.asarray(vectors))
    result = ingest_embeddings(
        inputs["vectors"],
        inputs["meta"],
        root,
        captions_file=inputs.get("captions"),
        images_dir=images_dir,
        dataset_name=name,
    )
    store = result.store
    if captions:
        with open(root / "captions.tsv", "w", encoding="utf-8") as fh:
            for item_id in sorted(captions):
                fh.write(f"{item_id}\t{captions[item_id]}\n")
        store.invalidate_caches()
    apply_projection(store, pca_project(store))
    tile_store(store, TilingConfig(k=k, rng_seed=seed))
    for kind in index_kinds:
        build_index(store, kind=kind, seed=seed)
    return store


@pytest.fixture
def small_store(tmp_path: Path) -> DatasetStore:
    """20 items, D=8, captions on a few items, flat index built."""
    rng = np.random.default_rng(1234)
    vectors = rng.standard_normal((20, 8)).astype(np.float32)
    return build_full_store(
        tmp_path / "small",
        vectors,
        k=5,
        captions={2: "a red bicycle", 7: "a mossy rock"},
        name="small",
    )


@pytest.fixture
def mock_embedded_store(tmp_path: Path) -> DatasetStore:
    """Store whose item vectors ARE the mock embeddings of 'q0'..'q19',
    so text query 'q7' must hit item 7 exactly."""
    dim = 16
    embedder = MockEmbedder(dimension=dim, seed=0)
    vectors = np.stack([embedder.embed("text", f"q{i}") for i in range(20)]).astype(
        np.float32
    )
    return build_full_store(tmp_path / "mockstore", vectors, k=5, name="mockstore")


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call":
        return
    if "acceptance" not in getattr(report, "keywords", {}):
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {status}: {name}", flush=True)
