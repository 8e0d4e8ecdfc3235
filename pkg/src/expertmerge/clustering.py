"""Bisecting k-means over embedding vectors.

Starts from one cluster and repeatedly splits the cluster with the
largest diameter using seeded 2-means until K clusters exist. Centroids
are arithmetic means renormalized to unit length so that large clusters
do not end up with systematically smaller centroid norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Above this size the exact O(n^2) diameter is replaced by the surrogate
# 2 * max distance to the cluster mean.
EXACT_DIAMETER_CAP = 512

TWO_MEANS_MAX_ITER = 25


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (n,) int array with values in [0, K)
    K: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.labels.min(initial=0) < 0 or (
            self.labels.size and self.labels.max() >= self.K
        ):
            raise ValueError("labels out of range [0, K)")
        counts = np.bincount(self.labels, minlength=self.K)
        if (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"cluster {empty} has no members")

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (K, d) float32, each row unit-norm
    sizes: np.ndarray  # (K,) int


def _pairwise_max_distance(points: np.ndarray) -> float:
    x = points.astype(np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return float(np.sqrt(max(0.0, d2.max())))


def _diameter(points: np.ndarray) -> float:
    if len(points) <= 1:
        return 0.0
    if len(points) <= EXACT_DIAMETER_CAP:
        return _pairwise_max_distance(points)
    mean = points.astype(np.float64).mean(axis=0)
    dists = np.linalg.norm(points.astype(np.float64) - mean, axis=1)
    return 2.0 * float(dists.max())


def cluster_diameter(
    embeddings: np.ndarray, assignment: ClusterAssignment, cluster_id: int
) -> float:
    """Exact max pairwise Euclidean distance within one cluster."""
    if cluster_id < 0 or cluster_id >= assignment.K:
        raise ValueError(f"cluster id {cluster_id} out of range [0, {assignment.K})")
    members = assignment.members(cluster_id)
    if len(members) <= 1:
        return 0.0
    return _pairwise_max_distance(np.asarray(embeddings)[members])


def _two_means_labels(points: np.ndarray, c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    d0 = np.linalg.norm(points - c0, axis=1)
    d1 = np.linalg.norm(points - c1, axis=1)
    # ties go to side 0 to keep the split deterministic
    return (d1 < d0).astype(np.int64)


def _two_means(points: np.ndarray, init: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, float]:
    """Lloyd iterations with k=2; returns (side labels, loss)."""
    c0, c1 = (c.astype(np.float64) for c in init)
    labels = _two_means_labels(points, c0, c1)
    for _ in range(TWO_MEANS_MAX_ITER):
        if labels.all() or not labels.any():
            break
        c0 = points[labels == 0].mean(axis=0)
        c1 = points[labels == 1].mean(axis=0)
        new_labels = _two_means_labels(points, c0, c1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    loss = 0.0
    for side in (0, 1):
        part = points[labels == side]
        if len(part):
            loss += float(((part - part.mean(axis=0)) ** 2).sum())
    return labels, loss


def _farthest_pair_init(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = points.mean(axis=0)
    a = int(np.argmax(np.linalg.norm(points - mean, axis=1)))
    b = int(np.argmax(np.linalg.norm(points - points[a], axis=1)))
    return points[a].copy(), points[b].copy()


def _random_init(points: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    i, j = rng.choice(len(points), size=2, replace=False)
    return points[i].copy(), points[j].copy()


def _split_cluster(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Split points into two non-empty sides; returns 0/1 side labels."""
    candidates = [_farthest_pair_init(points), _random_init(points, rng)]
    best_labels: np.ndarray | None = None
    best_loss = np.inf
    for init in candidates:
        labels, loss = _two_means(points, init)
        if labels.any() and not labels.all() and loss < best_loss:
            best_labels, best_loss = labels, loss
    if best_labels is None:
        # retry once with a fresh seeded init, then force a split by
        # moving the point farthest from the mean to its own side
        labels, _ = _two_means(points, _random_init(points, rng))
        if labels.any() and not labels.all():
            return labels
        best_labels = np.zeros(len(points), dtype=np.int64)
        far = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
        best_labels[far] = 1
    return best_labels


def bisecting_kmeans(embeddings: np.ndarray, K: int, seed: int) -> ClusterAssignment:
    """Cluster rows of `embeddings` into exactly K non-empty clusters."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > n:
        raise ValueError(f"K > n: requested {K} clusters for {n} embeddings")
    rng = np.random.default_rng(seed)
    clusters: list[np.ndarray] = [np.arange(n)]
    while len(clusters) < K:
        diameters = [_diameter(x[idx]) if len(idx) > 1 else -1.0 for idx in clusters]
        target = int(np.argmax(diameters))
        idx = clusters.pop(target)
        side = _split_cluster(x[idx], rng)
        clusters.insert(target, idx[side == 0])
        clusters.insert(target + 1, idx[side == 1])
    labels = np.empty(n, dtype=np.int64)
    for cid, idx in enumerate(clusters):
        labels[idx] = cid
    return ClusterAssignment(labels=labels, K=K)


def kmeans_loss(embeddings: np.ndarray, assignment: ClusterAssignment) -> float:
    """Sum of squared distances to the (un-normalized) cluster means."""
    x = np.asarray(embeddings, dtype=np.float64)
    total = 0.0
    for k in range(assignment.K):
        part = x[assignment.members(k)]
        total += float(((part - part.mean(axis=0)) ** 2).sum())
    return total


def compute_centroids(embeddings: np.ndarray, assignment: ClusterAssignment) -> CentroidSet:
    """Per-cluster mean embedding, renormalized to unit length."""
    x = np.asarray(embeddings, dtype=np.float64)
    centroids = np.empty((assignment.K, x.shape[1]), dtype=np.float32)
    sizes = np.empty(assignment.K, dtype=np.int64)
    for k in range(assignment.K):
        members = assignment.members(k)
        mean = x[members].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise ValueError(f"degenerate centroid: cluster {k} has zero-norm mean")
        centroids[k] = (mean / norm).astype(np.float32)
        sizes[k] = len(members)
    return CentroidSet(centroids=centroids, sizes=sizes)


def elbow_curve(
    embeddings: np.ndarray, K_list: list[int], seed: int
) -> list[tuple[int, float]]:
    """(K, k-means loss) for each K; loss is non-increasing in K."""
    if sorted(K_list) != list(K_list):
        raise ValueError("K_list must be sorted ascending")
    curve = []
    for K in K_list:
        assignment = bisecting_kmeans(embeddings, K, seed)
        curve.append((K, kmeans_loss(embeddings, assignment)))
    return curve
