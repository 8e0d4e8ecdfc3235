"""Merging-coefficient computation from a prompt embedding.

The main path is sparse cross-attention over expert centroids: cosine
logits scaled by a temperature, a sparse softmax that prunes experts
whose probability falls below a threshold, and renormalization of the
survivors. Alternative weighting schemes (fixed top-n, uniform top-n,
uncertainty-reduction, logit-entropy) live alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as lm

WEIGHTING_MODES = ("cross_attention", "uniform_topn", "sift", "dawin")


@dataclass(frozen=True)
class RoutingConfig:
    beta: float = 0.05  # temperature; tuned by holdout grid search
    tau: float = 0.01  # sparsity threshold, must satisfy tau < 1/K
    fixed_n: int | None = None  # fixed number of active experts instead of tau
    weighting: str = "cross_attention"

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.fixed_n is not None and self.fixed_n < 1:
            raise ValueError("fixed_n must be >= 1 when set")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class SiftConfig:
    lam: float = 0.1  # posterior-variance regularizer
    n_candidates: int = 10

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")


@dataclass
class MergeWeights:
    """Sparse convex distribution over expert ids."""

    entries: dict[int, float]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("merge weights must have at least one entry")
        if any(w <= 0 for w in self.entries.values()):
            raise ValueError("merge weights must be strictly positive")
        total = math.fsum(self.entries.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"merge weights must sum to 1, got {total}")

    @property
    def support(self) -> list[int]:
        return sorted(self.entries)

    @property
    def n_active(self) -> int:
        return len(self.entries)

    def argmax(self) -> int:
        # lower expert id wins ties
        return min(self.entries, key=lambda k: (-self.entries[k], k))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def sparse_softmax(z: np.ndarray, tau: float) -> MergeWeights:
    """softmax, prune entries with probability <= tau, renormalize.

    tau < 1/K guarantees at least one survivor: the largest softmax
    probability is always >= 1/K.
    """
    z = np.asarray(z, dtype=np.float64)
    K = len(z)
    if K < 1:
        raise ValueError("empty logit vector")
    if tau >= 1.0 / K:
        raise ValueError(f"tau too large for K: tau={tau} >= 1/{K}")
    p = _softmax(z)
    clipped = np.maximum(p - tau, 0.0)
    total = clipped.sum()
    entries = {int(k): float(clipped[k] / total) for k in np.flatnonzero(clipped > 0)}
    return MergeWeights(entries=entries)


def _cosine_logits(query: np.ndarray, catalog) -> np.ndarray:
    centroids = catalog.centroid_matrix().astype(np.float64)
    return centroids @ np.asarray(query, dtype=np.float64)


def route(query: np.ndarray, catalog, cfg: RoutingConfig) -> MergeWeights:
    """Cross-attention weights: sparse softmax of cosine/beta logits."""
    if cfg.fixed_n is not None:
        return route_fixed_n(query, catalog, cfg.fixed_n, cfg.beta)
    logits = _cosine_logits(query, catalog) / cfg.beta
    return sparse_softmax(logits, cfg.tau)


def route_batch(queries: np.ndarray, catalog, cfg: RoutingConfig) -> list[MergeWeights]:
    """Batched routing as one matrix product; row i equals route(queries[i])."""
    centroids = catalog.centroid_matrix().astype(np.float64)
    logits = np.asarray(queries, dtype=np.float64) @ centroids.T / cfg.beta
    if cfg.fixed_n is not None:
        return [route_fixed_n(q, catalog, cfg.fixed_n, cfg.beta) for q in queries]
    return [sparse_softmax(row, cfg.tau) for row in logits]


def _top_n_ids(logits: np.ndarray, n: int) -> np.ndarray:
    K = len(logits)
    if n < 1 or n > K:
        raise ValueError(f"n out of range [1, {K}]: {n}")
    # sort by descending logit, ties broken by lower expert id
    order = np.lexsort((np.arange(K), -logits))
    return order[:n]


def route_fixed_n(query: np.ndarray, catalog, n: int, beta: float) -> MergeWeights:
    """Softmax at temperature beta over the n nearest centroids only."""
    logits = _cosine_logits(query, catalog) / beta
    ids = _top_n_ids(logits, n)
    p = _softmax(logits[ids])
    return MergeWeights(entries={int(k): float(w) for k, w in zip(ids, p)})


def weights_uniform_topn(query: np.ndarray, catalog, n: int) -> MergeWeights:
    """1/n on each of the n nearest centroids."""
    logits = _cosine_logits(query, catalog)
    ids = _top_n_ids(logits, n)
    return MergeWeights(entries={int(k): 1.0 / n for k in ids})


def weights_sift(query: np.ndarray, catalog, cfg: SiftConfig) -> MergeWeights:
    """Uncertainty-reduction weights over the nearest centroids.

    With unit-norm embeddings the prior variance is 1. After conditioning
    on the i nearest centroids with a regularized kernel posterior
    (linear kernel, regularizer lam), the remaining variance is
    sigma_i^2 = 1 - k_i^T (K_i + lam*I)^{-1} k_i. Expert i gets the
    normalized decrement sigma_{i-1}^2 - sigma_i^2, which downweighs
    redundant (near-duplicate) centroids.
    """
    centroids = catalog.centroid_matrix().astype(np.float64)
    K = len(centroids)
    if cfg.n_candidates > K:
        raise ValueError(f"n_candidates {cfg.n_candidates} > number of experts {K}")
    logits = _cosine_logits(query, catalog)
    ids = _top_n_ids(logits, cfg.n_candidates)
    q = np.asarray(query, dtype=np.float64)
    variances = [1.0]
    for i in range(1, len(ids) + 1):
        sel = centroids[ids[:i]]
        gram = sel @ sel.T + cfg.lam * np.eye(i)
        k_q = sel @ q
        variances.append(float(1.0 - k_q @ np.linalg.solve(gram, k_q)))
    total = variances[0] - variances[-1]
    if total <= 0:
        raise ValueError("no uncertainty reduction")
    entries = {}
    for pos, expert in enumerate(ids):
        w = (variances[pos] - variances[pos + 1]) / total
        if w > 0:
            entries[int(expert)] = entries.get(int(expert), 0.0) + float(w)
    return MergeWeights(entries=entries)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def weights_dawin(
    prompt: str,
    catalog,
    base: lm.BaseParams,
    adapters: dict[int, lm.LoraAdapter],
    beta: float,
    tau: float,
) -> MergeWeights:
    """Entropy-based weights: one forward pass per expert on the prompt's
    final position, then sparse softmax over negated entropies. Expensive:
    costs K model evaluations."""
    K = catalog.centroid_matrix().shape[0]
    logits = np.empty(K, dtype=np.float64)
    for k in range(K):
        if k not in adapters:
            raise KeyError(f"missing adapter for expert {k}")
        probs = lm.forward(base, adapters[k], prompt)
        logits[k] = -entropy(probs) / beta
    return sparse_softmax(logits, tau)


def rbf_weights(query: np.ndarray, centroids: np.ndarray, beta: float) -> np.ndarray:
    """normalize(exp(-||q - c_k||^2 / (2 beta))); equals the softmax of
    cosine/beta logits when all vectors are unit-norm."""
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d2 = ((c - q) ** 2).sum(axis=1)
    z = -d2 / (2.0 * beta)
    e = np.exp(z - z.max())
    return e / e.sum()
