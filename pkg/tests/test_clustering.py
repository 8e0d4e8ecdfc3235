import itertools

import numpy as np
import pytest

from conftest import random_unit_vectors
from expertmerge.clustering import (
    ClusterAssignment,
    bisecting_kmeans,
    cluster_diameter,
    compute_centroids,
    elbow_curve,
    kmeans_loss,
)


def blobs_around(axes: list[int], per_blob: int, d: int, seed: int) -> np.ndarray:
    """Unit vectors near distinct coordinate axes (tight blobs)."""
    rng = np.random.default_rng(seed)
    points = []
    for axis in axes:
        for _ in range(per_blob):
            v = rng.standard_normal(d) * 0.05
            v[axis] += 1.0
            points.append(v / np.linalg.norm(v))
    return np.array(points)


def test_k1_single_cluster():
    x = random_unit_vectors(6, 4, 0)
    a = bisecting_kmeans(x, 1, 0)
    assert a.K == 1
    assert set(a.labels.tolist()) == {0}


def test_k_equals_n_singletons():
    x = random_unit_vectors(5, 4, 1)
    a = bisecting_kmeans(x, 5, 0)
    assert a.K == 5
    assert sorted(a.labels.tolist()) == [0, 1, 2, 3, 4]
    assert kmeans_loss(x, a) == 0.0


def test_k_out_of_range():
    x = random_unit_vectors(3, 4, 2)
    with pytest.raises(ValueError, match="K > n"):
        bisecting_kmeans(x, 4, 0)
    with pytest.raises(ValueError):
        bisecting_kmeans(x, 0, 0)


def brute_force_best_2partition(x: np.ndarray) -> float:
    """Minimum k-means loss over all 2-partitions (oracle, n <= 12)."""
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        loss = 0.0
        for part in (x[side], x[~side]):
            if len(part):
                loss += float(((part - part.mean(axis=0)) ** 2).sum())
        best = min(best, loss)
    return best


def test_two_blobs_recovered():
    x = blobs_around([0, 1], per_blob=5, d=6, seed=3)
    a = bisecting_kmeans(x, 2, 0)
    labels = a.labels
    # blob membership: first 5 vs last 5
    assert len(set(labels[:5].tolist())) == 1
    assert len(set(labels[5:].tolist())) == 1
    assert labels[0] != labels[5]
    # and the split is optimal per the exhaustive 2-partition oracle
    assert kmeans_loss(x, a) == pytest.approx(brute_force_best_2partition(x), rel=1e-9)


def test_kmeans_loss_matches_definition():
    x = random_unit_vectors(10, 5, 4)
    a = bisecting_kmeans(x, 3, 0)
    # independent re-implementation of the sum
    expected = 0.0
    for k in range(3):
        part = x[a.labels == k].astype(np.float64)
        mean = part.mean(axis=0)
        expected += sum(float(((p - mean) ** 2).sum()) for p in part)
    assert kmeans_loss(x, a) == pytest.approx(expected, rel=1e-12)


def test_antipodal_pair_loss():
    v = np.zeros(4)
    v[0] = 1.0
    x = np.stack([v, -v])
    a = ClusterAssignment(labels=np.array([0, 0]), K=1)
    assert kmeans_loss(x, a) == pytest.approx(2.0, abs=1e-12)


def test_cluster_diameter_cases():
    v = np.zeros(3)
    v[1] = 1.0
    x = np.stack([v, -v, v])
    a = ClusterAssignment(labels=np.array([0, 1, 2]), K=3)
    assert cluster_diameter(x, a, 0) == 0.0
    a2 = ClusterAssignment(labels=np.array([0, 0, 1]), K=2)
    assert cluster_diameter(x, a2, 0) == pytest.approx(2.0, abs=1e-12)


def test_cluster_diameter_exhaustive_oracle():
    x = random_unit_vectors(8, 5, 7)
    a = ClusterAssignment(labels=np.zeros(8, dtype=int), K=1)
    expected = max(
        float(np.linalg.norm(x[i].astype(np.float64) - x[j].astype(np.float64)))
        for i, j in itertools.combinations(range(8), 2)
    )
    assert cluster_diameter(x, a, 0) == pytest.approx(expected, rel=1e-9)


def test_cluster_diameter_bad_id():
    x = random_unit_vectors(4, 3, 8)
    a = ClusterAssignment(labels=np.zeros(4, dtype=int), K=1)
    with pytest.raises(ValueError):
        cluster_diameter(x, a, 1)


def test_centroids_singleton_and_norms():
    x = random_unit_vectors(6, 4, 9)
    a = bisecting_kmeans(x, 6, 0)
    cs = compute_centroids(x, a)
    for k in range(6):
        member = a.members(k)[0]
        assert np.allclose(cs.centroids[k], x[member], atol=1e-6)
    norms = np.linalg.norm(cs.centroids.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)
    assert cs.sizes.sum() == 6


def test_centroid_orthogonal_pair():
    e1 = np.zeros(4, dtype=np.float32)
    e2 = np.zeros(4, dtype=np.float32)
    e1[0] = 1.0
    e2[1] = 1.0
    a = ClusterAssignment(labels=np.array([0, 0]), K=1)
    cs = compute_centroids(np.stack([e1, e2]), a)
    expected = (e1 + e2) / np.sqrt(2.0)
    assert np.allclose(cs.centroids[0], expected, atol=1e-6)


def test_degenerate_centroid_rejected():
    v = np.zeros(4)
    v[2] = 1.0
    a = ClusterAssignment(labels=np.array([0, 0]), K=1)
    with pytest.raises(ValueError, match="degenerate centroid.*0"):
        compute_centroids(np.stack([v, -v]), a)


def test_elbow_curve():
    x = blobs_around([0, 1, 2], per_blob=4, d=6, seed=10)
    curve = elbow_curve(x, [1, 2, 3, 12], 0)
    losses = [loss for _, loss in curve]
    assert losses == sorted(losses, reverse=True) or all(
        losses[i] >= losses[i + 1] for i in range(len(losses) - 1)
    )
    assert losses[-1] == 0.0
    total_variance = kmeans_loss(x, ClusterAssignment(labels=np.zeros(12, dtype=int), K=1))
    assert curve[0][1] == pytest.approx(total_variance, rel=1e-12)
    with pytest.raises(ValueError):
        elbow_curve(x, [3, 1], 0)


def test_determinism():
    x = random_unit_vectors(40, 8, 11)
    a = bisecting_kmeans(x, 7, seed=5)
    b = bisecting_kmeans(x, 7, seed=5)
    assert np.array_equal(a.labels, b.labels)


def test_splits_never_increase_loss():
    x = random_unit_vectors(30, 6, 12)
    losses = [kmeans_loss(x, bisecting_kmeans(x, k, 0)) for k in range(1, 10)]
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-9


def test_assignment_validation():
    with pytest.raises(ValueError, match="no members"):
        ClusterAssignment(labels=np.array([0, 0]), K=2)
