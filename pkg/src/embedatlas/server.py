"""Read-only HTTP API over built dataset stores.

Routes (all JSON unless noted):

    GET  /healthz
    GET  /api/datasets
    GET  /api/datasets/{ds}/manifest
    GET  /api/datasets/{ds}/tiles/{layer}/{ix}/{iy}
    GET  /api/datasets/{ds}/items/{item_id}
    POST /api/datasets/{ds}/search
    GET  /media/{ds}/{item_id}/{size}     (image bytes; 32|128|512|orig)

No endpoint mutates a store.  Tile responses are deterministic per key, so
everything under /api and /media may be cached.  Missing media yields a
placeholder image with 200 and an "X-Placeholder: 1" marker header rather
than a 404, which keeps the viewer's render loop simple.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .model import TileKey
from .search import (
    MAX_IMAGE_BYTES,
    EmbedderError,
    EmbedderUnavailable,
    Query,
    make_embedder,
    semantic_search,
)
from .store import THUMB_SIZES, DatasetStore
from .vector_index import FlatIndex, HnswIndex, VectorIndexError, load_hnsw

logger = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    datasets_root: Path
    embedder_url: str | None = None
    media_cache_seconds: int = 31536000
    cors_origins: list[str] = field(default_factory=list)
    cors_allow_all: bool = False  # dev mode
    allow_empty: bool = False  # permit startup with zero datasets
    static_dir: Path | None = None  # optional explorer UI bundle


class _Dataset:
    """One loaded store plus its search machinery; loaded exactly once."""

    def __init__(self, name: str, root: Path, config: ServerConfig):
        self.name = name
        self.store = DatasetStore(root)
        self.manifest = self.store.manifest  # loads + validates JSON
        self._config = config
        self._lock = threading.Lock()
        self._flat: FlatIndex | None = None
        self._hnsw: HnswIndex | None = None
        self._embedder = None
        self._embedder_made = False

    @property
    def flat(self) -> FlatIndex:
        with self._lock:
            if self._flat is None:
                self._flat = FlatIndex(np.asarray(self.store.norm_vectors()))
            return self._flat

    @property
    def hnsw(self) -> HnswIndex | None:
        with self._lock:
            if self._hnsw is None:
                path = self.store.index_dir / "hnsw.aeh"
                if path.exists():
                    self._hnsw = load_hnsw(np.asarray(self.store.norm_vectors()), path)
            return self._hnsw

    @property
    def embedder(self):
        with self._lock:
            if not self._embedder_made:
                self._embedder = make_embedder(
                    self._config.embedder_url, self.manifest.dimension
                )
                self._embedder_made = True
            return self._embedder


def _scan_datasets(config: ServerConfig) -> dict[str, _Dataset]:
    datasets: dict[str, _Dataset] = {}
    root = Path(config.datasets_root)
    candidates = []
    if (root / "manifest.json").exists():
        candidates.append(root)
    if root.exists():
        candidates.extend(p for p in sorted(root.iterdir()) if (p / "manifest.json").exists())
    for path in candidates:
        try:
            ds = _Dataset(path.name, path, config)
        except Exception as exc:
            logger.warning("skipping dataset at %s: %s", path, exc)
            continue
        datasets[ds.name] = ds
    return datasets


def _thumb_urls(ds: str, item_id: int) -> dict[str, str]:
    return {str(s): f"/media/{ds}/{item_id}/{s}" for s in THUMB_SIZES}


def _placeholder_png(size: int) -> bytes:
    from PIL import Image

    img = Image.new("RGB", (size, size), (210, 210, 214))
    buf = io.BytesIO()
    img.save(buf, "PNG")
    return buf.getvalue()


def create_app(config: ServerConfig) -> FastAPI:
    datasets = _scan_datasets(config)
    if not datasets and not config.allow_empty:
        raise RuntimeError(
            f"no loadable dataset under {config.datasets_root}; "
            "pass allow_empty/--allow-empty to start anyway"
        )

    app = FastAPI(title="embedatlas", docs_url=None, redoc_url=None)
    placeholders: dict[int, bytes] = {}

    if config.cors_allow_all or config.cors_origins:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=["*"] if config.cors_allow_all else config.cors_origins,
            allow_methods=["GET", "POST"],
            allow_headers=["*"],
        )

    class ApiError(Exception):
        def __init__(self, status: int, reason: str, **extra):
            self.status = status
            self.body = {"error": reason, **extra}

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed_request"})

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body)

    def _dataset_or_404(name: str) -> _Dataset:
        ds = datasets.get(name)
        if ds is None:
            raise ApiError(404, f"unknown dataset {name!r}")
        return ds

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/api/datasets")
    def list_datasets():
        return [
            {
                "name": ds.name,
                "item_count": ds.manifest.item_count,
                "depth": ds.manifest.depth,
                "k": ds.manifest.k,
            }
            for ds in datasets.values()
        ]

    @app.get("/api/datasets/{name}/manifest")
    def get_manifest(name: str):
        ds = _dataset_or_404(name)
        return json.loads(ds.manifest.to_json())

    @app.get("/api/datasets/{name}/tiles/{layer}/{ix}/{iy}")
    def get_tile(name: str, layer: int, ix: int, iy: int):
        ds = _dataset_or_404(name)
        depth = ds.manifest.depth
        if depth is None:
            raise ApiError(409, "dataset has no tile pyramid; run the tile stage")
        if layer < 0 or layer > depth:
            raise ApiError(400, f"layer must be in 0..{depth}")
        grid = 1 << layer
        if not (0 <= ix < grid and 0 <= iy < grid):
            raise ApiError(400, f"tile indices must be in 0..{grid - 1} at layer {layer}")
        tile = ds.store.tile(TileKey(layer, ix, iy))
        reps = [] if tile is None else [
            {
                "id": r.id,
                "x": r.x,
                "y": r.y,
                "introduced_at_layer": r.introduced_at_layer,
                "thumb": _thumb_urls(name, r.id),
            }
            for r in tile.representatives
        ]
        return {"layer": layer, "ix": ix, "iy": iy, "representatives": reps}

    @app.get("/api/datasets/{name}/items/{item_id}")
    def get_item(name: str, item_id: int):
        ds = _dataset_or_404(name)
        n = ds.manifest.item_count
        if not (0 <= item_id < n):
            raise ApiError(404, f"unknown item id {item_id}")
        metadata = ds.store.metadata()[item_id]
        caption = ds.store.captions().get(item_id)
        position = None
        if ds.store.has_projection():
            coords = ds.store.coords()
            position = {"x": float(coords[item_id, 0]), "y": float(coords[item_id, 1])}
        neighbors = semantic_search(
            Query(kind="item", item=item_id), ds.flat, ds.store
        ).result
        return {
            "id": item_id,
            "metadata": metadata,
            "caption": caption,
            "has_caption": caption is not None,
            "position": position,
            "thumb": _thumb_urls(name, item_id),
            "neighbors": [
                {"id": e.id, "similarity": e.similarity, "thumb": _thumb_urls(name, e.id)}
                for e in neighbors.entries
            ],
        }

    @app.post("/api/datasets/{name}/search")
    async def post_search(name: str, request: Request):
        ds = _dataset_or_404(name)
        body_bytes = await request.body()
        if len(body_bytes) > MAX_IMAGE_BYTES * 2:
            raise ApiError(413, "request body too large")
        try:
            body = json.loads(body_bytes)
        except json.JSONDecodeError:
            raise ApiError(400, "malformed_request", detail="body is not valid JSON")
        if not isinstance(body, dict):
            raise ApiError(400, "malformed_request", detail="body must be an object")

        kind = body.get("kind")
        data = body.get("data")
        n = body.get("n", 9)
        try:
            if kind == "text":
                query = Query(kind="text", text=str(data), n=int(n))
            elif kind == "image":
                try:
                    image = base64.b64decode(data, validate=True)
                except (binascii.Error, TypeError):
                    raise ApiError(400, "malformed_request", detail="data must be base64")
                if len(image) > MAX_IMAGE_BYTES:
                    raise ApiError(413, f"image exceeds {MAX_IMAGE_BYTES} bytes")
                query = Query(kind="image", image=image, n=int(n))
            elif kind == "vector":
                vec = np.asarray(data, dtype=np.float64)
                query = Query(kind="vector", vector=vec, n=int(n))
            elif kind == "item":
                query = Query(kind="item", item=int(data), n=int(n))
            else:
                raise ApiError(400, "malformed_request", detail=f"unknown kind {kind!r}")
        except ApiError:
            raise
        except (TypeError, ValueError) as exc:
            raise ApiError(400, "malformed_request", detail=str(exc))

        try:
            outcome = semantic_search(query, ds.flat, ds.store, embedder=ds.embedder)
        except EmbedderUnavailable as exc:
            raise ApiError(503, "embedder_unavailable", detail=str(exc), retry=True)
        except EmbedderError as exc:
            raise ApiError(502, "embedder_protocol_error", detail=str(exc))
        except KeyError as exc:
            raise ApiError(404, "unknown_item", detail=str(exc))
        except (VectorIndexError, ValueError) as exc:
            raise ApiError(400, "malformed_request", detail=str(exc))

        best = outcome.best_position
        return {
            "entries": [
                {"id": e.id, "similarity": e.similarity} for e in outcome.result.entries
            ],
            "best_position": None if best is None else {"x": best[0], "y": best[1]},
        }

    @app.get("/media/{name}/{item_id}/{size}")
    def get_media(name: str, item_id: int, size: str):
        ds = _dataset_or_404(name)
        if not (0 <= item_id < ds.manifest.item_count):
            raise ApiError(404, f"unknown item id {item_id}")
        cache = f"public, max-age={config.media_cache_seconds}, immutable"
        if size == "orig":
            path = ds.store.original_path(item_id)
            px = 512
        else:
            try:
                px = int(size)
            except ValueError:
                raise ApiError(400, f"size must be one of {THUMB_SIZES} or 'orig'")
            if px not in THUMB_SIZES:
                raise ApiError(400, f"size must be one of {THUMB_SIZES} or 'orig'")
            path = ds.store.thumb_path(item_id, px)
        if path is not None and path.exists():
            media_type = "image/jpeg" if path.suffix in (".jpg", ".jpeg") else "image/png"
            return Response(
                content=path.read_bytes(),
                media_type=media_type,
                headers={"Cache-Control": cache},
            )
        if px not in placeholders:
            placeholders[px] = _placeholder_png(px)
        return Response(
            content=placeholders[px],
            media_type="image/png",
            headers={"Cache-Control": cache, "X-Placeholder": "1"},
        )

    if config.static_dir is not None and Path(config.static_dir).exists():
        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="ui")

    return app
