"""Pipeline driver: ingest -> project -> tile -> index -> validate/serve.

Every stage reads and writes the on-disk store, so any stage can be replaced
by an external tool that honors the file formats (e.g. a UMAP script that
emits an AEC1 coordinates file consumed by `project --coords`).

Exit codes: 0 ok, 2 bad flags, 3 missing stage input, 4 validation failure,
5 I/O error.  Stage timers are printed as single lines
("[timer] stage=<name> seconds=<s>") for benchmarking.
"""

from __future__ import annotations

import logging
import sys
import tarfile
import time
from contextlib import contextmanager
from pathlib import Path

import click
from filelock import FileLock, Timeout

from . import formats, ingest as ingest_mod, projection, report as report_mod, tiling
from .store import LOCK_FILE, DatasetStore, StoreError
from .validate import validate_store
from .vector_index import (
    DEFAULT_EF_CONSTRUCTION,
    DEFAULT_EF_SEARCH,
    DEFAULT_M,
    build_index,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_VALIDATION = 4
EXIT_IO = 5

logger = logging.getLogger("embedatlas")


def _setup_logging() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(message)s", stream=sys.stdout, force=True
    )


@contextmanager
def stage_timer(stage: str):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    logger.info("[timer] stage=%s seconds=%.3f", stage, elapsed)


@contextmanager
def store_lock(root: Path):
    """One mutating command at a time per store."""
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(root / LOCK_FILE)
    try:
        with lock.acquire(timeout=10):
            yield
    except Timeout:
        raise click.ClickException(f"another command holds the lock on {root}")


def _fail(code: int, message: str) -> None:
    logger.error("error: %s", message)
    sys.exit(code)


def _open_store(path: Path) -> DatasetStore:
    store = DatasetStore(path)
    try:
        store.manifest
    except StoreError as exc:
        _fail(EXIT_MISSING_INPUT, str(exc))
    return store


@click.group()
def main() -> None:
    """embedatlas: build and serve layered atlases of embedding spaces."""
    _setup_logging()


@main.command("ingest")
@click.option("--vectors", "vectors_file", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--meta", "meta_file", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--captions", "captions_file", type=click.Path(exists=True, path_type=Path))
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--name", "dataset_name", default=None, help="dataset name (default: out dir name)")
def cmd_ingest(vectors_file, meta_file, captions_file, images_dir, out_dir, dataset_name):
    """Load vectors + metadata (+ captions, images) into a new store."""
    try:
        with store_lock(out_dir), stage_timer("ingest"):
            result = ingest_mod.ingest_embeddings(
                vectors_file,
                meta_file,
                out_dir,
                captions_file=captions_file,
                images_dir=images_dir,
                dataset_name=dataset_name,
            )
    except (formats.FormatError, ingest_mod.IngestError) as exc:
        _fail(EXIT_IO, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    logger.info(
        "ingested %d items into %s (%d rejected, %d without images)",
        result.item_count,
        out_dir,
        len(result.rejected_rows),
        len(result.missing_images),
    )


@main.command("project")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--coords", "coords_file", type=click.Path(exists=True, path_type=Path),
              help="externally computed AEC1 coordinates (default: built-in PCA)")
def cmd_project(store_dir, coords_file):
    """Compute or adopt 2D positions, normalized to the unit square."""
    store = _open_store(store_dir)
    try:
        with store_lock(store_dir), stage_timer("project"):
            if coords_file is not None:
                result = projection.load_external_coords(coords_file, store)
            else:
                result = projection.pca_project(store)
            projection.apply_projection(store, result)
    except (formats.FormatError, projection.ProjectionError) as exc:
        _fail(EXIT_IO, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    logger.info(
        "projected %d items via %s (raw bounds %s, rank %d)",
        store.item_count,
        result.method,
        result.raw_bounds,
        result.rank,
    )


@main.command("tile")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--k", required=True, type=int, help="representatives per tile")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--max-iterations", default=50, type=int, show_default=True)
@click.option("--convergence-eps", default=1e-6, type=float, show_default=True)
@click.option("--max-depth", default=16, type=int, show_default=True)
@click.option("--workers", default=0, type=int, show_default=True,
              help="parallel tile jobs per layer (0 = serial)")
def cmd_tile(store_dir, k, seed, max_iterations, convergence_eps, max_depth, workers):
    """Build the layered representative pyramid (requires project)."""
    store = _open_store(store_dir)
    if not store.has_projection():
        _fail(EXIT_MISSING_INPUT, f"{store_dir}: no coordinates; run project first")
    try:
        cfg = tiling.TilingConfig(
            k=k,
            max_iterations=max_iterations,
            convergence_eps=convergence_eps,
            rng_seed=seed,
            max_depth_cap=max_depth,
            workers=workers,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    logger.info("tiling with k=%d seed=%d max_depth=%d", k, seed, max_depth)
    try:
        with store_lock(store_dir), stage_timer("tile"):
            pyramid = tiling.tile_store(store, cfg)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    logger.info(
        "pyramid depth=%d capped=%s tiles per layer=%s digest=%s",
        pyramid.depth,
        pyramid.depth_capped,
        pyramid.per_layer_nonempty_tile_counts,
        pyramid.digest()[:16],
    )


@main.command("index")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--kind", default="flat", type=click.Choice(["flat", "hnsw"]), show_default=True)
@click.option("--m", default=DEFAULT_M, type=int, show_default=True)
@click.option("--ef-construction", default=DEFAULT_EF_CONSTRUCTION, type=int, show_default=True)
@click.option("--ef-search", default=DEFAULT_EF_SEARCH, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
def cmd_index(store_dir, kind, m, ef_construction, ef_search, seed):
    """Build the cosine-similarity index over the stored vectors."""
    store = _open_store(store_dir)
    logger.info("indexing kind=%s seed=%d", kind, seed)
    try:
        with store_lock(store_dir), stage_timer("index"):
            index = build_index(
                store,
                kind=kind,
                m=m,
                ef_construction=ef_construction,
                ef_search=ef_search,
                seed=seed,
            )
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    logger.info("index kind=%s n=%d D=%d", index.kind, index.count, index.dimension)


@main.command("validate")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
def cmd_validate(store_dir):
    """Run the full invariant checker; exits 4 on any violation."""
    store = _open_store(store_dir)
    with stage_timer("validate"):
        try:
            violations = validate_store(store)
        except (StoreError, formats.FormatError, ValueError) as exc:
            _fail(EXIT_MISSING_INPUT, str(exc))
    if violations:
        for v in violations:
            logger.error("violation: %s", v)
        _fail(EXIT_VALIDATION, f"{len(violations)} violation(s) found")
    logger.info("store valid: %s", store_dir)


@main.command("export")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
def cmd_export(store_dir, out_file):
    """Pack the store (manifest, vectors, coords, tiles, ...) into a tar.gz."""
    store = _open_store(store_dir)
    try:
        with stage_timer("export"):
            _write_archive(store, out_file)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    logger.info("exported %s -> %s", store_dir, out_file)


@main.command("report")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
              help="output directory (default: <store>/report)")
def cmd_report(store_dir, out_dir):
    """Render diagnostic figures and per-layer CSV for a built store."""
    store = _open_store(store_dir)
    if not store.has_projection() or store.manifest.depth is None:
        _fail(EXIT_MISSING_INPUT, f"{store_dir}: report needs project + tile stages")
    out = out_dir if out_dir is not None else Path(store_dir) / "report"
    try:
        with stage_timer("report"):
            written = report_mod.write_report(store, out)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    for path in written:
        logger.info("wrote %s", path)


@main.command("serve")
@click.option("--datasets", "datasets_root", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, type=int, show_default=True)
@click.option("--embedder", "embedder_url", default=None, envvar="AEYE_EMBEDDER_URL",
              help="embedding service endpoint (env AEYE_EMBEDDER_URL); 'mock://' for the test mock")
@click.option("--cors", "cors_origins", multiple=True, help="allowed CORS origin (repeatable)")
@click.option("--cors-all", is_flag=True, help="dev mode: allow any origin")
@click.option("--allow-empty", is_flag=True, help="start even with zero datasets")
@click.option("--static-dir", type=click.Path(exists=True, path_type=Path), default=None,
              help="serve an explorer UI bundle at /")
def cmd_serve(datasets_root, host, port, embedder_url, cors_origins, cors_all, allow_empty, static_dir):
    """Serve the read-only HTTP API over every store under --datasets."""
    import uvicorn

    from .server import ServerConfig, create_app

    config = ServerConfig(
        datasets_root=datasets_root,
        embedder_url=embedder_url,
        cors_origins=list(cors_origins),
        cors_allow_all=cors_all,
        allow_empty=allow_empty,
        static_dir=static_dir,
    )
    try:
        app = create_app(config)
    except RuntimeError as exc:
        _fail(EXIT_MISSING_INPUT, str(exc))
    logger.info("serving on http://%s:%d (embedder: %s)", host, port, embedder_url or "none")
    uvicorn.run(app, host=host, port=port, log_level="info")


def _write_archive(store: DatasetStore, out_file: Path) -> None:
    """Deterministic tar.gz (fixed mtimes/owners) so exports digest-match."""
    import gzip

    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    with open(out_file, "wb") as raw:
        gz = gzip.GzipFile(fileobj=raw, mode="wb", mtime=0)
        with tarfile.open(fileobj=gz, mode="w") as tar:
            for path in sorted(store.root.rglob("*")):
                if not path.is_file() or path.name == LOCK_FILE:
                    continue
                info = tarfile.TarInfo(str(path.relative_to(store.root)))
                info.size = path.stat().st_size
                info.mtime = 0
                info.uname = info.gname = ""
                info.uid = info.gid = 0
                with open(path, "rb") as fh:
                    tar.addfile(info, fh)
        gz.close()


if __name__ == "__main__":
    main()
