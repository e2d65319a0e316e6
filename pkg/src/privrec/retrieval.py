"""Embeddings, cosine similarity and the exact top-k product index.

Two embedding providers: a deterministic hashed n-gram encoder that
needs no model weights, and a client for a remote /embed service.
Both return unit-length float64 vectors (the hash encoder normalizes;
remote vectors are trusted as-is but validated for shape).
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .catalog import Catalog, canonical_text
from .errors import BackendError, ConfigError, MetricError, SimilarityError

__all__ = [
    "HashEmbeddingProvider",
    "RemoteEmbeddingProvider",
    "cosine",
    "VectorIndex",
    "build_index",
    "nearest",
    "save_index",
    "load_index",
]

DEFAULT_DIMENSION = 384

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashEmbeddingProvider:
    """Signed feature hashing over token 1/2/3-grams, L2-normalized.

    Buckets and signs come from a keyed blake2b digest, so vectors are
    identical across processes and platforms.  Texts with no tokens map
    to the zero vector; similarity against those is rejected downstream.
    """

    kind = "hash"

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ConfigError(f"embedding dimension must be positive, got {dimension}")
        self.dimension = dimension

    def identity(self) -> dict:
        return {"kind": self.kind, "dimension": self.dimension}

    def _accumulate(self, text: str, out: np.ndarray) -> None:
        tokens = _TOKEN_RE.findall(text.lower())
        for n in (1, 2, 3):
            for i in range(len(tokens) - n + 1):
                gram = " ".join(tokens[i : i + n])
                digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
                value = int.from_bytes(digest, "big")
                sign = 1.0 if value & 1 else -1.0
                out[(value >> 1) % self.dimension] += sign

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            self._accumulate(text, vectors[row])
            norm = float(np.linalg.norm(vectors[row]))
            if norm > 0.0:
                vectors[row] /= norm
        return vectors


class RemoteEmbeddingProvider:
    """Client for the POST /embed contract: {"texts": [...]} in,
    {"embeddings": [[...], ...]} out, one vector per text in order."""

    kind = "remote"

    def __init__(self, base_url: str, dimension: int = DEFAULT_DIMENSION,
                 timeout: float = 30.0, batch_size: int = 64):
        if not base_url:
            raise ConfigError("remote embedding provider requires a base_url")
        self.base_url = base_url.rstrip("/")
        self.dimension = dimension
        self.timeout = timeout
        self.batch_size = max(1, batch_size)

    def identity(self) -> dict:
        return {"kind": self.kind, "base_url": self.base_url, "dimension": self.dimension}

    def _post_batch(self, batch: list[str]) -> np.ndarray:
        try:
            response = requests.post(
                f"{self.base_url}/embed", json={"texts": batch}, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise BackendError("transport", f"embedding service unreachable: {exc}")
        if response.status_code != 200:
            raise BackendError(
                "protocol", f"embedding service returned HTTP {response.status_code}"
            )
        try:
            rows = response.json()["embeddings"]
        except (ValueError, KeyError) as exc:
            raise BackendError("protocol", f"malformed embedding response: {exc}")
        matrix = np.asarray(rows, dtype=np.float64)
        if matrix.shape != (len(batch), self.dimension):
            raise BackendError(
                "protocol",
                f"expected {len(batch)}x{self.dimension} embeddings, got {matrix.shape}",
            )
        if not np.all(np.isfinite(matrix)):
            raise BackendError("protocol", "embedding response contains non-finite values")
        return matrix

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float64)
        chunks = [
            self._post_batch(list(texts[i : i + self.batch_size]))
            for i in range(0, len(texts), self.batch_size)
        ]
        return np.vstack(chunks)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise MetricError(f"cosine over mismatched shapes {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise SimilarityError("cosine similarity is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class VectorIndex:
    dimension: int
    ids: list[str]
    categories: list[str]
    vectors: np.ndarray  # (rows, dimension) float64

    def __post_init__(self):
        if self.vectors.shape != (len(self.ids), self.dimension):
            raise ConfigError(
                f"index shape {self.vectors.shape} does not match "
                f"{len(self.ids)} ids at dimension {self.dimension}"
            )
        if len(self.categories) != len(self.ids):
            raise ConfigError("index categories and ids differ in length")

    def __len__(self) -> int:
        return len(self.ids)


def build_index(catalog: Catalog, provider) -> VectorIndex:
    """Embed every product's canonical text, one row per product."""
    ids = sorted(catalog.products)
    texts = [canonical_text(catalog.products[pid]) for pid in ids]
    vectors = provider.embed(texts)
    return VectorIndex(
        dimension=provider.dimension,
        ids=ids,
        categories=[catalog.products[pid].main_category for pid in ids],
        vectors=np.asarray(vectors, dtype=np.float64),
    )


def nearest(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[str, str, float]]:
    """Exact top-k by cosine, descending; ties break on ascending id.

    Returns (product_id, main_category, similarity) triples.
    """
    if len(index) == 0:
        raise MetricError("nearest-neighbour query against an empty index")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise MetricError(
            f"query shape {query.shape} does not match index dimension {index.dimension}"
        )
    qnorm = float(np.linalg.norm(query))
    if qnorm == 0.0:
        raise SimilarityError("cannot search with a zero-magnitude query vector")

    norms = np.linalg.norm(index.vectors, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    sims = (index.vectors @ query) / (safe * qnorm)
    sims = np.where(norms == 0.0, -np.inf, sims)

    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.ids[i]))
    return [
        (index.ids[i], index.categories[i], float(sims[i]))
        for i in order[:k]
    ]


_INDEX_MAGIC = b"PRIX"
_INDEX_VERSION = 1


def save_index(path, index: VectorIndex) -> None:
    """Flat binary layout: magic, version, dimension, row count, then
    per row (id, category, dimension float64 values)."""
    with open(path, "wb") as handle:
        handle.write(_INDEX_MAGIC)
        handle.write(struct.pack("<III", _INDEX_VERSION, index.dimension, len(index)))
        for row in range(len(index)):
            for text in (index.ids[row], index.categories[row]):
                raw = text.encode("utf-8")
                handle.write(struct.pack("<I", len(raw)))
                handle.write(raw)
            handle.write(index.vectors[row].astype("<f8").tobytes())


def load_index(path) -> VectorIndex:
    data = Path(path).read_bytes()
    if data[:4] != _INDEX_MAGIC:
        raise ConfigError(f"{path} is not a vector index file")
    version, dimension, rows = struct.unpack_from("<III", data, 4)
    if version != _INDEX_VERSION:
        raise ConfigError(f"unsupported index version: {version}")
    offset = 16
    ids: list[str] = []
    categories: list[str] = []
    vectors = np.zeros((rows, dimension), dtype=np.float64)
    try:
        for row in range(rows):
            fields = []
            for _ in range(2):
                (length,) = struct.unpack_from("<I", data, offset)
                offset += 4
                fields.append(data[offset : offset + length].decode("utf-8"))
                offset += length
            ids.append(fields[0])
            categories.append(fields[1])
            vectors[row] = np.frombuffer(data, dtype="<f8", count=dimension, offset=offset)
            offset += 8 * dimension
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ConfigError(f"truncated or corrupt index file {path}: {exc}")
    return VectorIndex(dimension=dimension, ids=ids, categories=categories, vectors=vectors)
