from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
import numpy.typing as npt

from .text import normalize_label

Embedding = npt.NDArray[np.float64]

DEFAULT_DIMENSION = 256


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> Embedding: ...


class HashedTrigramEmbedder:
    # Padded character trigrams hashed into BLAKE2b buckets, then L2-normalized.

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension

    def embed(self, text: str) -> Embedding:
        vector = np.zeros(self.dimension, dtype=np.float64)
        normalized = normalize_label(text)
        if not normalized:
            return vector
        padded = f" {normalized} "
        for start in range(len(padded) - 2):
            vector[self._bucket(padded[start : start + 3])] += 1.0
        return vector / np.linalg.norm(vector)

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension


def embed_text(text: str, embedder: Embedder | None = None) -> Embedding:
    return (embedder or HashedTrigramEmbedder()).embed(text)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))
