"""On-disk dataset store: the single artifact every pipeline stage reads.

Layout under the store root:

    manifest.json        stage-progressive atlas manifest
    vectors.aev          retained embedding rows, AEV1 format
    vectors_norm.f32     unit-normalized rows, raw n*D float32 (memory-mappable)
    metadata.jsonl       one JSON object per item, line i <-> id i
    captions.tsv         "<id><TAB><caption>" for items that have one
    coords.f32           normalized positions, raw n*2 float32
    tiles/<layer>/<ix>_<iy>.tile
    index/               persisted vector indexes
    assets/<size>/<id>.jpg   thumbnails (32/128/512), assets/orig/<id>.<ext>

The store is append-only while a stage runs and read-only afterward;
concurrent readers never need locking.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import formats
from .model import AtlasManifest, Tile, TileKey

THUMB_SIZES = (32, 128, 512)

MANIFEST_FILE = "manifest.json"
VECTORS_FILE = "vectors.aev"
NORM_FILE = "vectors_norm.f32"
METADATA_FILE = "metadata.jsonl"
CAPTIONS_FILE = "captions.tsv"
COORDS_FILE = "coords.f32"
TILES_DIR = "tiles"
INDEX_DIR = "index"
ASSETS_DIR = "assets"
LOCK_FILE = "store.lock"


class StoreError(RuntimeError):
    """Missing or inconsistent store contents."""


class DatasetStore:
    """Read/write handle on one dataset's directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._manifest: AtlasManifest | None = None
        self._norm: np.ndarray | None = None
        self._metadata: list[dict[str, str]] | None = None
        self._captions: dict[int, str] | None = None
        self._coords: np.ndarray | None = None

    # -- paths ---------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    @property
    def vectors_path(self) -> Path:
        return self.root / VECTORS_FILE

    @property
    def norm_path(self) -> Path:
        return self.root / NORM_FILE

    @property
    def coords_path(self) -> Path:
        return self.root / COORDS_FILE

    @property
    def tiles_dir(self) -> Path:
        return self.root / TILES_DIR

    @property
    def index_dir(self) -> Path:
        return self.root / INDEX_DIR

    @property
    def assets_dir(self) -> Path:
        return self.root / ASSETS_DIR

    @property
    def lock_path(self) -> Path:
        return self.root / LOCK_FILE

    # -- manifest ------------------------------------------------------

    @property
    def manifest(self) -> AtlasManifest:
        if self._manifest is None:
            if not self.manifest_path.exists():
                raise StoreError(f"{self.root}: no manifest; run ingest first")
            self._manifest = AtlasManifest.load(self.manifest_path)
        return self._manifest

    def save_manifest(self, manifest: AtlasManifest) -> None:
        self._manifest = manifest
        manifest.save(self.manifest_path)

    # -- vectors -------------------------------------------------------

    @property
    def item_count(self) -> int:
        return self.manifest.item_count

    @property
    def dimension(self) -> int:
        return self.manifest.dimension

    def vectors(self) -> np.ndarray:
        """Raw (retained) embedding rows as stored, float32."""
        mat, _ = formats.read_vectors(self.vectors_path)
        return mat

    def norm_vectors(self) -> np.ndarray:
        """Unit-normalized rows, memory-mapped read-only."""
        if self._norm is None:
            if not self.norm_path.exists():
                raise StoreError(f"{self.root}: missing {NORM_FILE}; run ingest first")
            n, d = self.item_count, self.dimension
            self._norm = np.memmap(self.norm_path, dtype="<f4", mode="r", shape=(n, d))
        return self._norm

    def vector_of(self, item_id: int) -> np.ndarray:
        return np.asarray(self.norm_vectors()[item_id], dtype=np.float64)

    # -- metadata / captions -------------------------------------------

    def metadata(self) -> list[dict[str, str]]:
        if self._metadata is None:
            path = self.root / METADATA_FILE
            if not path.exists():
                raise StoreError(f"{self.root}: missing {METADATA_FILE}")
            records = []
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    records.append(json.loads(line))
            self._metadata = records
        return self._metadata

    def captions(self) -> dict[int, str]:
        if self._captions is None:
            path = self.root / CAPTIONS_FILE
            caps: dict[int, str] = {}
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        line = line.rstrip("\n")
                        if not line:
                            continue
                        item_id, _, text = line.partition("\t")
                        caps[int(item_id)] = text
            self._captions = caps
        return self._captions

    # -- coordinates ---------------------------------------------------

    def has_projection(self) -> bool:
        return self.coords_path.exists()

    def coords(self) -> np.ndarray:
        """Normalized unit-square positions (n, 2), float64 (f32-exact)."""
        if self._coords is None:
            if not self.has_projection():
                raise StoreError(f"{self.root}: no coordinates; run project first")
            raw = np.fromfile(self.coords_path, dtype="<f4").reshape(-1, 2)
            if raw.shape[0] != self.item_count:
                raise StoreError(
                    f"{self.root}: coords count {raw.shape[0]} != item count {self.item_count}"
                )
            self._coords = raw.astype(np.float64)
        return self._coords

    def save_coords(self, coords: np.ndarray) -> None:
        arr = np.ascontiguousarray(coords, dtype="<f4")
        arr.tofile(self.coords_path)
        self._coords = None

    # -- tiles ---------------------------------------------------------

    def has_pyramid(self) -> bool:
        return self.tiles_dir.exists() and self.manifest.depth is not None

    def tile_path(self, key: TileKey) -> Path:
        return self.tiles_dir / str(key.layer) / f"{key.ix}_{key.iy}.tile"

    def tile(self, key: TileKey) -> Tile | None:
        """Stored tile, or None when the tile is empty."""
        path = self.tile_path(key)
        if not path.exists():
            return None
        return formats.read_tile(path, key)

    def iter_tile_keys(self, layer: int) -> list[TileKey]:
        layer_dir = self.tiles_dir / str(layer)
        if not layer_dir.exists():
            return []
        keys = []
        for p in layer_dir.iterdir():
            if p.suffix != ".tile":
                continue
            ix, iy = p.stem.split("_")
            keys.append(TileKey(layer, int(ix), int(iy)))
        return sorted(keys)

    # -- assets --------------------------------------------------------

    def thumb_path(self, item_id: int, size: int) -> Path:
        return self.assets_dir / str(size) / f"{item_id}.jpg"

    def original_path(self, item_id: int) -> Path | None:
        orig_dir = self.assets_dir / "orig"
        if not orig_dir.exists():
            return None
        hits = sorted(orig_dir.glob(f"{item_id}.*"))
        return hits[0] if hits else None

    # -- integrity ------------------------------------------------------

    def digest(self) -> str:
        """SHA-256 over every file (sorted relative path + content)."""
        h = hashlib.sha256()
        for path in sorted(self.root.rglob("*")):
            if not path.is_file() or path.name == LOCK_FILE:
                continue
            h.update(str(path.relative_to(self.root)).encode())
            h.update(b"\0")
            h.update(path.read_bytes())
            h.update(b"\0")
        return h.hexdigest()

    def invalidate_caches(self) -> None:
        self._manifest = None
        self._norm = None
        self._metadata = None
        self._captions = None
        self._coords = None
