"""Sentence encoders behind the /embed endpoint.

Two backends: a deterministic hashed n-gram encoder that needs no
weights (the default, and what the contract tests run against), and an
optional sentence-transformers model loaded from a local directory.
Both return one finite vector per text, at the advertised dimension.
"""
from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError

DEFAULT_DIMENSION = 384
DEFAULT_MODEL_ID = f"hash-{DEFAULT_DIMENSION}"

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_HASH_ID_RE = re.compile(r"^hash-([0-9]+)$")


class HashedNgramEncoder:
    """Signed feature hashing over token 1/2/3-grams, L2-normalized.

    Buckets and signs come from a keyed blake2b digest, so vectors are
    identical across processes and platforms.  Texts with no tokens map
    to the zero vector.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ConfigError(f"embedding dimension must be positive, got {dimension}")
        self.dimension = dimension

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower())
            for n in (1, 2, 3):
                for i in range(len(tokens) - n + 1):
                    gram = " ".join(tokens[i : i + n])
                    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
                    value = int.from_bytes(digest, "big")
                    sign = 1.0 if value & 1 else -1.0
                    vectors[row, (value >> 1) % self.dimension] += sign
            norm = float(np.linalg.norm(vectors[row]))
            if norm > 0.0:
                vectors[row] /= norm
        return vectors


class SentenceTransformerEncoder:
    """Wrapper over a sentence-transformers model stored on disk."""

    def __init__(self, model_dir: Path):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ConfigError(f"sentence-transformers is not installed: {exc}") from exc
        self._model = SentenceTransformer(str(model_dir), device="cpu")
        self.dimension = int(self._model.get_sentence_embedding_dimension())

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        encoded = self._model.encode(
            list(texts), convert_to_numpy=True, show_progress_bar=False
        )
        return np.asarray(encoded, dtype=np.float64).reshape(len(texts), self.dimension)


def resolve_encoder(model_id: str):
    """Map an embedding model id to an encoder instance.

    "hash-<D>" selects the hashed n-gram encoder at dimension D; a path
    to an existing directory loads a sentence-transformers model from it.
    """
    match = _HASH_ID_RE.match(model_id)
    if match:
        return HashedNgramEncoder(int(match.group(1)))
    path = Path(model_id)
    if path.is_dir():
        return SentenceTransformerEncoder(path)
    raise ConfigError(
        f"unknown embedding model {model_id!r}: expected hash-<dimension> or a model directory"
    )
