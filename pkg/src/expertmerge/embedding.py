"""Deterministic hashed character n-gram embedder.

Maps a text to a mean-pooled, L2-normalized dense vector using signed
feature hashing of character n-grams. Fully deterministic for a fixed
seed, which makes clustering and routing exactly reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 256
    ngram_orders: tuple[int, ...] = (2, 3, 4)
    hash_seed: int = 0x5EED_1E55_C0FF_EE00

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise ValueError(f"dim must be >= 8, got {self.dim}")
        if not self.ngram_orders:
            raise ValueError("ngram_orders must be non-empty")
        if any(n < 1 for n in self.ngram_orders):
            raise ValueError(f"ngram orders must be >= 1, got {self.ngram_orders}")

    def fingerprint(self) -> str:
        """Hex digest identifying this embedder configuration."""
        payload = f"{self.dim}|{','.join(map(str, self.ngram_orders))}|{self.hash_seed}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _hash_ngram(seed: int, gram: str) -> int:
    """Stable 64-bit hash of an n-gram under a fixed seed."""
    key = seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(gram.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def ngrams(text: str, orders: tuple[int, ...]) -> list[str]:
    grams: list[str] = []
    for n in orders:
        if n <= len(text):
            grams.extend(text[i : i + n] for i in range(len(text) - n + 1))
        else:
            # shorter texts still contribute the whole string once per order
            grams.append(text)
    return grams


def bucket_sign(config: EmbedderConfig, gram: str) -> tuple[int, int]:
    """(bucket index, ±1 sign) for one n-gram. Exposed for test oracles."""
    h = _hash_ngram(config.hash_seed, gram)
    bucket = (h >> 1) % config.dim
    sign = 1 if (h & 1) else -1
    return bucket, sign


def embed(config: EmbedderConfig, text: str) -> np.ndarray:
    """Embed text into a unit-norm float32 vector of length config.dim.

    Each character n-gram of each configured order is hashed into one of
    dim buckets with a ±1 sign; bucket sums are averaged over the n-gram
    count and L2-normalized.
    """
    if not text:
        raise ValueError("empty sequence")
    grams = ngrams(text, config.ngram_orders)
    acc = np.zeros(config.dim, dtype=np.float64)
    for gram in grams:
        bucket, sign = bucket_sign(config, gram)
        acc[bucket] += sign
    acc /= len(grams)
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        raise ValueError("degenerate embedding")
    return (acc / norm).astype(np.float32)


def embed_corpus(config: EmbedderConfig, docs: list[str]) -> np.ndarray:
    """Stack embeddings of all documents into an (n, dim) float32 matrix."""
    return np.stack([embed(config, doc) for doc in docs])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two unit vectors, clipped to [-1, 1]."""
    dot = float(np.dot(a.astype(np.float64), b.astype(np.float64)))
    return min(1.0, max(-1.0, dot))
