"""Load embeddings, metadata, captions and image assets into a DatasetStore.

Input contracts (any embedding producer can feed the pipeline):

  vectors file   AEV1 binary (see formats module).
  metadata file  one UTF-8 record per line, line i <-> item id i.  A record
                 is TAB-separated "key:value" fields; "filename" is expected
                 first, "label" and "url" are optional, extra keys are kept
                 verbatim.  Values may contain colons but not tabs/newlines.
  captions file  optional; lines of "<id><TAB><caption>".
  images dir     optional; files referenced by each record's "filename".

Items whose vector cannot be unit-normalized (zero norm or non-finite
components) are rejected and reported; surviving items are renumbered to the
dense id range 0..n-1 in file order.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .model import AtlasManifest
from .store import THUMB_SIZES, DatasetStore

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    """Invalid or inconsistent ingest inputs."""


@dataclass
class IngestResult:
    store: DatasetStore
    item_count: int
    rejected_rows: list[int]  # input row indexes dropped for bad vectors
    missing_images: list[int]  # item ids whose image could not be read


def parse_metadata_line(line: str) -> dict[str, str]:
    record: dict[str, str] = {}
    for field in line.rstrip("\n").split("\t"):
        if not field:
            continue
        key, sep, value = field.partition(":")
        if not sep:
            raise IngestError(f"metadata field without ':' separator: {field!r}")
        record[key.strip()] = value
    return record


def read_metadata_file(path: Path) -> list[dict[str, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() == "":
                continue
            records.append(parse_metadata_line(line))
    return records


def read_captions_file(path: Path) -> dict[int, str]:
    captions: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            head, sep, text = line.partition("\t")
            if not sep:
                raise IngestError(f"captions line {lineno}: missing TAB separator")
            try:
                item_id = int(head)
            except ValueError as exc:
                raise IngestError(f"captions line {lineno}: bad item id {head!r}") from exc
            captions[item_id] = text
    return captions


def ingest_embeddings(
    vectors_file: Path,
    meta_file: Path,
    out_dir: Path,
    captions_file: Path | None = None,
    images_dir: Path | None = None,
    dataset_name: str | None = None,
    thumbnail_workers: int = 4,
) -> IngestResult:
    """Build a DatasetStore from the raw input files.

    Returns the store plus the list of rejected input rows (zero-norm or
    non-finite vectors) and the ids whose images were unreadable.
    """
    vectors_file = Path(vectors_file)
    meta_file = Path(meta_file)
    out_dir = Path(out_dir)

    vectors, version = formats.read_vectors(vectors_file)
    n_in, dim = vectors.shape
    if dim < 2:
        raise IngestError(f"embedding dimension must be >= 2, got {dim}")

    records = read_metadata_file(meta_file)
    if len(records) != n_in:
        raise IngestError(
            f"metadata line count {len(records)} != vector row count {n_in}"
        )

    captions_in: dict[int, str] = {}
    if captions_file is not None:
        captions_in = read_captions_file(Path(captions_file))
        bad = [i for i in captions_in if not (0 <= i < n_in)]
        if bad:
            raise IngestError(f"caption ids out of range 0..{n_in - 1}: {sorted(bad)[:10]}")

    # Reject rows that cannot live in a cosine index.
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    finite = np.isfinite(vectors).all(axis=1)
    keep = finite & (norms > 0.0)
    rejected = np.flatnonzero(~keep).tolist()
    for row in rejected:
        reason = "zero-norm" if finite[row] else "non-finite"
        logger.warning("rejecting input row %d: %s vector", row, reason)
    if not keep.any():
        raise IngestError("no usable vectors after rejecting zero-norm/non-finite rows")

    kept_rows = np.flatnonzero(keep)
    kept_vectors = vectors[kept_rows]
    normalized = (kept_vectors.astype(np.float64) / norms[kept_rows, None]).astype("<f4")
    n = len(kept_rows)

    out_dir.mkdir(parents=True, exist_ok=True)
    store = DatasetStore(out_dir)

    # Retained rows keep their original bytes so ingest->export round-trips.
    formats.write_vectors(store.vectors_path, kept_vectors, version=version)
    normalized.tofile(store.norm_path)

    with open(out_dir / "metadata.jsonl", "w", encoding="utf-8") as fh:
        for row in kept_rows:
            fh.write(json.dumps(records[row], sort_keys=True, ensure_ascii=False) + "\n")

    old_to_new = {int(old): new for new, old in enumerate(kept_rows)}
    kept_captions = {
        old_to_new[i]: text for i, text in captions_in.items() if i in old_to_new
    }
    if kept_captions:
        with open(out_dir / "captions.tsv", "w", encoding="utf-8") as fh:
            for item_id in sorted(kept_captions):
                fh.write(f"{item_id}\t{kept_captions[item_id]}\n")

    manifest = AtlasManifest(
        dataset_name=dataset_name or out_dir.name,
        item_count=n,
        dimension=dim,
    )
    store.save_manifest(manifest)

    missing_images: list[int] = []
    if images_dir is not None:
        missing_images = _generate_thumbnails(
            store,
            Path(images_dir),
            [records[row] for row in kept_rows],
            workers=thumbnail_workers,
        )

    return IngestResult(
        store=store,
        item_count=n,
        rejected_rows=rejected,
        missing_images=missing_images,
    )


def _generate_thumbnails(
    store: DatasetStore,
    images_dir: Path,
    records: list[dict[str, str]],
    workers: int = 4,
) -> list[int]:
    """Precompute 32/128/512 px thumbnails; returns ids with unreadable images."""
    from PIL import Image

    for size in THUMB_SIZES:
        (store.assets_dir / str(size)).mkdir(parents=True, exist_ok=True)
    orig_dir = store.assets_dir / "orig"
    orig_dir.mkdir(parents=True, exist_ok=True)

    def work(item: tuple[int, dict[str, str]]) -> int | None:
        item_id, record = item
        filename = record.get("filename")
        if not filename:
            return item_id
        src = images_dir / filename
        if not src.exists():
            return item_id
        try:
            with Image.open(src) as img:
                img = img.convert("RGB")
                for size in THUMB_SIZES:
                    thumb = img.copy()
                    thumb.thumbnail((size, size))
                    thumb.save(store.thumb_path(item_id, size), "JPEG", quality=88)
            shutil.copyfile(src, orig_dir / f"{item_id}{src.suffix.lower()}")
        except Exception:
            logger.warning("unreadable image for item %d: %s", item_id, src)
            return item_id
        return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, enumerate(records)))
    missing = sorted(r for r in results if r is not None)
    for item_id in missing:
        logger.warning("item %d has no readable image; placeholder will be served", item_id)
    return missing


def export_vectors(store: DatasetStore, out_path: Path) -> None:
    """Write the store's retained vectors back out as an AEV1 file."""
    shutil.copyfile(store.vectors_path, out_path)
