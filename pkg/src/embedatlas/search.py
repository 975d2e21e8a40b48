"""Query resolution: text/image/vector/item lookups against the vector index.

Text and image queries are embedded by an external HTTP service speaking a
one-endpoint protocol:

    POST <endpoint>/embed
    body     {"kind": "text"|"image", "data": <utf-8 text | base64 image>}
    response {"vector": [D floats]}

A deterministic in-process mock (endpoint "mock://<seed>") stands in for the
service in tests and demos: it hashes the payload into a seeded RNG and
returns a unit vector, so identical inputs embed identically everywhere.
Vector and item queries bypass the embedder entirely.
"""

from __future__ import annotations

import base64
import hashlib
import threading
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from .store import DatasetStore
from .vector_index import SearchResult, VectorIndex

DEFAULT_TIMEOUT = 10.0
DEFAULT_RESULT_COUNT = 9
MAX_RESULT_COUNT = 100
MAX_IMAGE_BYTES = 8 * 1024 * 1024  # documented upload cap
EMBED_CONCURRENCY = 4  # in-flight limit protecting the external service

QUERY_KINDS = ("text", "image", "vector", "item")


class EmbedderError(RuntimeError):
    """Protocol violation from the embedding service (wrong shape, bad data)."""


class EmbedderUnavailable(EmbedderError):
    """Service unreachable or timed out; the caller may retry."""


class Embedder(Protocol):
    def embed(self, kind: str, payload: str | bytes) -> np.ndarray: ...


@dataclass
class Query:
    kind: str  # text | image | vector | item
    text: str | None = None
    image: bytes | None = None
    vector: np.ndarray | None = None
    item: int | None = None
    n: int = DEFAULT_RESULT_COUNT

    def __post_init__(self) -> None:
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        payloads = {
            "text": self.text,
            "image": self.image,
            "vector": self.vector,
            "item": self.item,
        }
        if payloads[self.kind] is None:
            raise ValueError(f"query kind {self.kind!r} requires a matching payload")
        others = [k for k, v in payloads.items() if v is not None and k != self.kind]
        if others:
            raise ValueError(f"query kind {self.kind!r} carries extra payloads: {others}")
        if not (1 <= self.n <= MAX_RESULT_COUNT):
            raise ValueError(f"result count must be in 1..{MAX_RESULT_COUNT}, got {self.n}")
        if self.kind == "image" and len(self.image) > MAX_IMAGE_BYTES:
            raise ValueError(f"image payload exceeds {MAX_IMAGE_BYTES} bytes")


class MockEmbedder:
    """Deterministic stand-in: payload hash -> seeded RNG -> unit vector."""

    def __init__(self, dimension: int, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def embed(self, kind: str, payload: str | bytes) -> np.ndarray:
        if kind not in ("text", "image"):
            raise EmbedderError(f"embedder only handles text/image, got {kind!r}")
        data = payload.encode("utf-8") if isinstance(payload, str) else payload
        digest = hashlib.sha256(f"{self.seed}:{kind}:".encode() + data).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dimension)
        return v / np.linalg.norm(v)


class HttpEmbedder:
    """Client for the external embedding service."""

    def __init__(
        self,
        endpoint_url: str,
        expected_dimension: int,
        timeout: float = DEFAULT_TIMEOUT,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint_url = endpoint_url.rstrip("/")
        self.expected_dimension = expected_dimension
        self.timeout = timeout
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._gate = threading.Semaphore(EMBED_CONCURRENCY)

    def embed(self, kind: str, payload: str | bytes) -> np.ndarray:
        if kind not in ("text", "image"):
            raise EmbedderError(f"embedder only handles text/image, got {kind!r}")
        if isinstance(payload, bytes):
            data = base64.b64encode(payload).decode("ascii")
        else:
            data = payload
        try:
            with self._gate:
                resp = self._client.post(
                    f"{self.endpoint_url}/embed", json={"kind": kind, "data": data}
                )
            resp.raise_for_status()
            body = resp.json()
        except (httpx.TransportError, httpx.TimeoutException) as exc:
            raise EmbedderUnavailable(
                f"embedding service unreachable at {self.endpoint_url}: {exc}; retry later"
            ) from exc
        except httpx.HTTPStatusError as exc:
            raise EmbedderUnavailable(
                f"embedding service error {exc.response.status_code}; retry later"
            ) from exc
        vector = np.asarray(body.get("vector", []), dtype=np.float64)
        if vector.ndim != 1 or vector.shape[0] != self.expected_dimension:
            raise EmbedderError(
                f"embedding service returned dimension {vector.shape[-1] if vector.ndim else 0}, "
                f"expected {self.expected_dimension}"
            )
        if not np.isfinite(vector).all():
            raise EmbedderError("embedding service returned non-finite components")
        return vector


def make_embedder(
    endpoint_url: str | None,
    dimension: int,
    timeout: float = DEFAULT_TIMEOUT,
    transport: httpx.BaseTransport | None = None,
) -> Embedder | None:
    """Embedder from a URL: "mock://<seed>" in-process, http(s) remote, None off."""
    if not endpoint_url:
        return None
    if endpoint_url.startswith("mock://"):
        tail = endpoint_url[len("mock://"):]
        return MockEmbedder(dimension, seed=int(tail) if tail else 0)
    return HttpEmbedder(endpoint_url, dimension, timeout=timeout, transport=transport)


def embed_query(embedder: Embedder | None, kind: str, payload: str | bytes) -> np.ndarray:
    if embedder is None:
        raise EmbedderUnavailable("no embedding service configured; retry with one")
    return embedder.embed(kind, payload)


@dataclass
class SemanticSearchResult:
    result: SearchResult
    best_position: tuple[float, float] | None  # fly-to target for the viewer


def semantic_search(
    query: Query,
    index: VectorIndex,
    store: DatasetStore,
    embedder: Embedder | None = None,
) -> SemanticSearchResult:
    """Resolve any query kind to a vector, search, and attach the top hit's
    projected position.  Item queries exclude the item itself (neighbor
    semantics)."""
    if query.kind == "text":
        qvec = embed_query(embedder, "text", query.text)
    elif query.kind == "image":
        qvec = embed_query(embedder, "image", query.image)
    elif query.kind == "vector":
        qvec = np.asarray(query.vector, dtype=np.float64)
    else:  # item
        if not (0 <= query.item < store.item_count):
            raise KeyError(f"unknown item id {query.item}")
        qvec = store.vector_of(query.item)

    if query.kind == "item":
        raw = index.query(qvec, query.n + 1)
        entries = tuple(e for e in raw.entries if e.id != query.item)[: query.n]
        result = SearchResult(entries)
    else:
        result = index.query(qvec, query.n)

    best = None
    if result.entries and store.has_projection():
        coords = store.coords()
        top = result.entries[0].id
        best = (float(coords[top, 0]), float(coords[top, 1]))
    return SemanticSearchResult(result=result, best_position=best)
