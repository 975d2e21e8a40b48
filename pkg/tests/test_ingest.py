"""Ingest contracts: normalization, rejection, round trips, determinism."""

import numpy as np
import pytest
from PIL import Image

from embedatlas import formats
from embedatlas.ingest import (
    IngestError,
    export_vectors,
    ingest_embeddings,
    parse_metadata_line,
)
from embedatlas.store import DatasetStore
from tests.conftest import write_inputs


def test_three_items_counted(tmp_path):
    vectors = np.eye(3, 4, dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    result = ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store")
    assert result.item_count == 3
    assert result.store.manifest.item_count == 3
    assert [r["filename"] for r in result.store.metadata()] == [
        "img_00000.png",
        "img_00001.png",
        "img_00002.png",
    ]


def test_normalization_three_four_five(tmp_path):
    vectors = np.array([[3.0, 4.0, 0.0, 0.0]], dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    store = ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store").store
    norm = np.asarray(store.norm_vectors())
    assert norm[0] == pytest.approx([0.6, 0.8, 0.0, 0.0], abs=1e-7)


def test_unit_norm_invariant(tmp_path):
    rng = np.random.default_rng(3)
    vectors = rng.standard_normal((50, 6)).astype(np.float32) * 10
    paths = write_inputs(tmp_path / "in", vectors)
    store = ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store").store
    norms = np.linalg.norm(np.asarray(store.norm_vectors(), dtype=np.float64), axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-6


def test_caption_round_trip(tmp_path):
    vectors = np.eye(3, 4, dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors, captions={2: "a red bicycle"})
    store = ingest_embeddings(
        paths["vectors"], paths["meta"], tmp_path / "store", captions_file=paths["captions"]
    ).store
    assert store.captions() == {2: "a red bicycle"}


def test_zero_norm_vector_rejected_and_ids_renumbered(tmp_path):
    vectors = np.array(
        [[1, 0], [0, 0], [0, 2], [3, 0]], dtype=np.float32
    )
    paths = write_inputs(tmp_path / "in", vectors, captions={0: "first", 2: "third"})
    result = ingest_embeddings(
        paths["vectors"], paths["meta"], tmp_path / "store", captions_file=paths["captions"]
    )
    assert result.rejected_rows == [1]
    assert result.item_count == 3
    # ids renumbered densely in file order; captions follow their items
    assert result.store.captions() == {0: "first", 1: "third"}
    kept = result.store.vectors()
    assert np.array_equal(kept, vectors[[0, 2, 3]])


def test_non_finite_vector_rejected(tmp_path):
    vectors = np.array([[1, 0], [np.nan, 1], [0, 1]], dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    result = ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store")
    assert result.rejected_rows == [1]
    assert result.item_count == 2


def test_metadata_count_mismatch(tmp_path):
    vectors = np.eye(3, 4, dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    with open(paths["meta"], "a", encoding="utf-8") as fh:
        fh.write("filename:extra.png\n")
    with pytest.raises(IngestError, match="line count"):
        ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store")


def test_vector_payload_mismatch(tmp_path):
    vectors = np.eye(3, 4, dtype=np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    raw = paths["vectors"].read_bytes()
    paths["vectors"].write_bytes(raw[:-8])
    with pytest.raises(formats.FormatError):
        ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store")


def test_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(9)
    vectors = rng.standard_normal((17, 5)).astype(np.float32)
    paths = write_inputs(tmp_path / "in", vectors)
    store = ingest_embeddings(paths["vectors"], paths["meta"], tmp_path / "store").store
    out = tmp_path / "exported.aev"
    export_vectors(store, out)
    assert out.read_bytes() == paths["vectors"].read_bytes()


def test_ingest_deterministic_digest(tmp_path):
    rng = np.random.default_rng(11)
    vectors = rng.standard_normal((10, 4)).astype(np.float32)
    paths = write_inputs(tmp_path / "in", vectors, captions={1: "hi"})
    a = ingest_embeddings(
        paths["vectors"], paths["meta"], tmp_path / "a",
        captions_file=paths["captions"], dataset_name="same",
    ).store
    b = ingest_embeddings(
        paths["vectors"], paths["meta"], tmp_path / "b",
        captions_file=paths["captions"], dataset_name="same",
    ).store
    assert a.digest() == b.digest()


def test_metadata_line_parsing():
    record = parse_metadata_line("filename:a.png\tlabel:cat\turl:https://x/y:z\n")
    assert record == {"filename": "a.png", "label": "cat", "url": "https://x/y:z"}
    with pytest.raises(IngestError):
        parse_metadata_line("no-separator-here")


def test_thumbnails_generated_and_unreadable_reported(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    names = ["ok_0.png", "ok_1.png", "broken.png", "absent.png"]
    for name in names[:2]:
        Image.new("RGB", (64, 48), (200, 30, 30)).save(images / name)
    (images / "broken.png").write_bytes(b"not an image at all")

    vectors = np.eye(4, 3, dtype=np.float32) + 0.1
    paths = write_inputs(tmp_path / "in", vectors, filenames=names)
    result = ingest_embeddings(
        paths["vectors"], paths["meta"], tmp_path / "store", images_dir=images
    )
    assert result.missing_images == [2, 3]
    store = result.store
    for item_id in (0, 1):
        for size in (32, 128, 512):
            path = store.thumb_path(item_id, size)
            assert path.exists()
            with Image.open(path) as img:
                assert max(img.size) <= size
    assert store.original_path(0) is not None
    assert store.original_path(2) is None
