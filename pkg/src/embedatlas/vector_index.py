"""Cosine-similarity search over the item embeddings: flat exact + HNSW.

Vectors are unit-normalized once at build time, so cosine similarity is a
plain dot product everywhere.  The flat index is the exact reference (full
scan, similarities in float64, total deterministic ordering); HNSW trades
exactness for sublinear queries through a layered navigable proximity graph.
Both are immutable after build and safe for concurrent readers.

Result ordering is always descending similarity with ties broken by
ascending id.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import DatasetStore

HNSW_MAGIC = b"AEHN"
DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 64


class VectorIndexError(ValueError):
    """Invalid index input (bad query vector, empty store, ...)."""


@dataclass(frozen=True)
class SearchEntry:
    id: int
    similarity: float


@dataclass(frozen=True)
class SearchResult:
    entries: tuple[SearchEntry, ...]

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]


def _check_query(q: np.ndarray, dimension: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dimension:
        raise VectorIndexError(f"query dimension {q.shape[0]} != index dimension {dimension}")
    if not np.isfinite(q).all():
        raise VectorIndexError("query vector has non-finite components")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise VectorIndexError("zero query vector: direction undefined")
    return q / norm


def _order_entries(sims: np.ndarray, top: int) -> list[SearchEntry]:
    ids = np.arange(len(sims))
    order = np.lexsort((ids, -sims))[:top]
    return [SearchEntry(int(i), float(np.clip(sims[i], -1.0, 1.0))) for i in order]


class FlatIndex:
    """Exact full-scan index: the ground truth the approximate path is judged by."""

    kind = "flat"

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise VectorIndexError(f"need a non-empty (n, D) matrix, got shape {vectors.shape}")
        self._vectors = vectors
        self._vectors64: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self._vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self._vectors.shape[1]

    def _mat64(self) -> np.ndarray:
        if self._vectors64 is None:
            self._vectors64 = self._vectors.astype(np.float64)
        return self._vectors64

    def query(self, q: np.ndarray, n: int = 9) -> SearchResult:
        if n < 1:
            raise VectorIndexError(f"result count must be >= 1, got {n}")
        qn = _check_query(q, self.dimension)
        sims = self._mat64() @ qn
        return SearchResult(tuple(_order_entries(sims, min(n, self.count))))

    def query_batch(self, queries: np.ndarray, n: int = 9) -> list[SearchResult]:
        """One matmul for many queries; same ordering contract as query()."""
        queries = np.asarray(queries, dtype=np.float64)
        qn = np.stack([_check_query(q, self.dimension) for q in queries])
        sims_all = self._mat64() @ qn.T
        top = min(n, self.count)
        return [
            SearchResult(tuple(_order_entries(sims_all[:, j], top)))
            for j in range(sims_all.shape[1])
        ]


class HnswIndex:
    """Hierarchical navigable small-world graph over the same vectors.

    Node levels follow the usual geometric distribution (factor 1/ln 2) from
    a seeded generator, so builds are reproducible.  Layer 0 allows 2*M
    neighbors per node, upper layers M.  Neighbor sets are chosen with the
    diversity heuristic (keep a candidate only if it is closer to the new
    node than to anything already kept, then backfill), which keeps the
    graph navigable on clustered data.
    """

    kind = "hnsw"

    def __init__(
        self,
        vectors: np.ndarray,
        m: int = DEFAULT_M,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        ef_search: int = DEFAULT_EF_SEARCH,
        seed: int = 0,
        _defer_build: bool = False,
    ):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise VectorIndexError(f"need a non-empty (n, D) matrix, got shape {vectors.shape}")
        self._vectors = vectors
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self._ml = 1.0 / math.log(2.0)
        self.entry_point = -1
        self.max_level = -1
        # neighbors[level][node] -> list of node ids (nodes absent from a level
        # simply have no entry there)
        self._neighbors: list[dict[int, list[int]]] = []
        self._levels = np.zeros(self.count, dtype=np.int32)
        if not _defer_build:
            self._build()

    @property
    def count(self) -> int:
        return self._vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self._vectors.shape[1]

    # -- distances ------------------------------------------------------

    def _dists(self, q: np.ndarray, ids: list[int]) -> np.ndarray:
        return 1.0 - self._vectors[ids] @ q

    # -- construction ---------------------------------------------------

    def _build(self) -> None:
        rng = np.random.default_rng(self.seed)
        draws = rng.random(self.count)
        for node in range(self.count):
            level = int(-math.log(max(draws[node], 1e-300)) * self._ml)
            self._insert(node, level)

    def _insert(self, node: int, level: int) -> None:
        self._levels[node] = level
        while len(self._neighbors) <= level:
            self._neighbors.append({})
        for lc in range(level + 1):
            self._neighbors[lc][node] = []

        if self.entry_point < 0:
            self.entry_point = node
            self.max_level = level
            return

        q = self._vectors[node].astype(np.float32)
        entries = [self.entry_point]
        for lc in range(self.max_level, level, -1):
            entries = [nid for _, nid in self._search_layer(q, entries, lc, 1)]

        for lc in range(min(level, self.max_level), -1, -1):
            candidates = self._search_layer(q, entries, lc, self.ef_construction)
            max_conn = self.m0 if lc == 0 else self.m
            chosen = self._select_neighbors(q, candidates, self.m)
            self._neighbors[lc][node] = list(chosen)
            for nb in chosen:
                lst = self._neighbors[lc][nb]
                lst.append(node)
                if len(lst) > max_conn:
                    nbv = self._vectors[nb].astype(np.float32)
                    pairs = sorted(zip(self._dists(nbv, lst), lst))
                    self._neighbors[lc][nb] = self._select_neighbors(nbv, pairs, max_conn)
            entries = [nid for _, nid in candidates]

        if level > self.max_level:
            self.max_level = level
            self.entry_point = node

    def _select_neighbors(
        self, q: np.ndarray, candidates: list[tuple[float, int]], m: int
    ) -> list[int]:
        """Diversity-aware neighbor pick (closer to q than to anything kept)."""
        if len(candidates) <= m:
            return [nid for _, nid in candidates]
        kept: list[int] = []
        spilled: list[int] = []
        for dist, nid in candidates:
            if len(kept) >= m:
                break
            if not kept:
                kept.append(nid)
                continue
            d_to_kept = float(self._dists(self._vectors[nid].astype(np.float32), kept).min())
            if dist < d_to_kept:
                kept.append(nid)
            else:
                spilled.append(nid)
        for nid in spilled:
            if len(kept) >= m:
                break
            kept.append(nid)
        return kept

    def _search_layer(
        self, q: np.ndarray, entries: list[int], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Greedy best-first expansion; returns (dist, id) ascending by dist."""
        graph = self._neighbors[layer]
        visited = set(entries)
        dists = self._dists(q, entries)
        candidates = [(float(d), nid) for d, nid in zip(dists, entries)]
        heapq.heapify(candidates)
        best = [(-d, nid) for d, nid in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)

        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            fresh = [nb for nb in graph.get(node, ()) if nb not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for d, nb in zip(self._dists(q, fresh), fresh):
                d = float(d)
                if len(best) < ef:
                    heapq.heappush(candidates, (d, nb))
                    heapq.heappush(best, (-d, nb))
                elif d < -best[0][0]:
                    heapq.heappush(candidates, (d, nb))
                    heapq.heappushpop(best, (-d, nb))
        return sorted((-nd, nid) for nd, nid in best)

    # -- queries ---------------------------------------------------------

    def query(self, q: np.ndarray, n: int = 9, ef_search: int | None = None) -> SearchResult:
        if n < 1:
            raise VectorIndexError(f"result count must be >= 1, got {n}")
        qn = _check_query(q, self.dimension).astype(np.float32)
        ef = max(ef_search or self.ef_search, n)
        entries = [self.entry_point]
        for lc in range(self.max_level, 0, -1):
            entries = [nid for _, nid in self._search_layer(qn, entries, lc, 1)]
        found = self._search_layer(qn, entries, 0, ef)

        ids = [nid for _, nid in found]
        sims = self._vectors[ids].astype(np.float64) @ _check_query(q, self.dimension)
        ranked = sorted(zip(ids, sims), key=lambda t: (-t[1], t[0]))[: min(n, self.count)]
        return SearchResult(
            tuple(SearchEntry(int(i), float(np.clip(s, -1.0, 1.0))) for i, s in ranked)
        )


VectorIndex = FlatIndex | HnswIndex


def build_index(
    store: DatasetStore,
    kind: str = "flat",
    m: int = DEFAULT_M,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    ef_search: int = DEFAULT_EF_SEARCH,
    seed: int = 0,
) -> VectorIndex:
    """Build an index over the store's normalized vectors and persist it."""
    vectors = np.asarray(store.norm_vectors())
    store.index_dir.mkdir(parents=True, exist_ok=True)
    if kind == "flat":
        index: VectorIndex = FlatIndex(vectors)
        meta = {"kind": "flat", "count": index.count, "dimension": index.dimension}
        (store.index_dir / "flat.json").write_text(json.dumps(meta, sort_keys=True))
        return index
    if kind == "hnsw":
        index = HnswIndex(vectors, m=m, ef_construction=ef_construction, ef_search=ef_search, seed=seed)
        save_hnsw(index, store.index_dir / "hnsw.aeh")
        return index
    raise ValueError(f"unknown index kind: {kind!r}")


def load_index(store: DatasetStore, kind: str = "flat") -> VectorIndex:
    vectors = np.asarray(store.norm_vectors())
    if kind == "flat":
        if not (store.index_dir / "flat.json").exists():
            raise FileNotFoundError(f"{store.root}: flat index not built")
        return FlatIndex(vectors)
    if kind == "hnsw":
        return load_hnsw(vectors, store.index_dir / "hnsw.aeh")
    raise ValueError(f"unknown index kind: {kind!r}")


# -- HNSW persistence: adjacency as length-prefixed id arrays -------------


def save_hnsw(index: HnswIndex, path: Path) -> None:
    parts = [
        struct.pack(
            "<4sIQIIIIqi",
            HNSW_MAGIC,
            1,
            index.count,
            index.dimension,
            index.m,
            index.ef_construction,
            index.ef_search,
            index.seed,
            index.entry_point,
        ),
        struct.pack("<i", index.max_level),
    ]
    for node in range(index.count):
        level = int(index._levels[node])
        parts.append(struct.pack("<H", level))
        for lc in range(level + 1):
            ids = index._neighbors[lc][node]
            parts.append(struct.pack("<H", len(ids)))
            parts.append(np.asarray(ids, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_hnsw(vectors: np.ndarray, path: Path) -> HnswIndex:
    raw = Path(path).read_bytes()
    head = struct.Struct("<4sIQIIIIqi")
    magic, _version, n, dim, m, ef_c, ef_s, seed, entry = head.unpack_from(raw)
    if magic != HNSW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    (max_level,) = struct.unpack_from("<i", raw, head.size)
    index = HnswIndex(
        vectors, m=m, ef_construction=ef_c, ef_search=ef_s, seed=seed, _defer_build=True
    )
    if index.count != n or index.dimension != dim:
        raise ValueError(
            f"{path}: index built for n={n}, D={dim}; store has n={index.count}, D={index.dimension}"
        )
    index.entry_point = entry
    index.max_level = max_level
    index._neighbors = [{} for _ in range(max_level + 1)]
    off = head.size + 4
    for node in range(n):
        (level,) = struct.unpack_from("<H", raw, off)
        off += 2
        index._levels[node] = level
        for lc in range(level + 1):
            (count,) = struct.unpack_from("<H", raw, off)
            off += 2
            ids = np.frombuffer(raw, dtype="<u4", count=count, offset=off)
            off += 4 * count
            index._neighbors[lc][node] = [int(i) for i in ids]
    return index
