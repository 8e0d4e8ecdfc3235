import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FakeCatalog, random_unit_vectors
from expertmerge import model as lm
from expertmerge.routing import (
    MergeWeights,
    RoutingConfig,
    SiftConfig,
    rbf_weights,
    route,
    route_batch,
    route_fixed_n,
    sparse_softmax,
    weights_dawin,
    weights_sift,
    weights_uniform_topn,
)


def softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def test_merge_weights_validation():
    with pytest.raises(ValueError):
        MergeWeights(entries={})
    with pytest.raises(ValueError):
        MergeWeights(entries={0: 0.5, 1: 0.4})
    with pytest.raises(ValueError):
        MergeWeights(entries={0: 1.5, 1: -0.5})
    w = MergeWeights(entries={3: 0.25, 1: 0.75})
    assert w.support == [1, 3]
    assert w.argmax() == 1


def test_sparse_softmax_equal_logits():
    w = sparse_softmax(np.zeros(3), tau=0.0)
    assert w.entries == {0: pytest.approx(1 / 3), 1: pytest.approx(1 / 3), 2: pytest.approx(1 / 3)}


def test_sparse_softmax_hand_example():
    # softmax probs (0.5, 0.3, 0.2) with tau 0.25 -> (5/6, 1/6, dropped)
    z = np.log(np.array([0.5, 0.3, 0.2]))
    w = sparse_softmax(z, tau=0.25)
    assert w.entries[0] == pytest.approx(5 / 6, rel=1e-12)
    assert w.entries[1] == pytest.approx(1 / 6, rel=1e-12)
    assert 2 not in w.entries


def test_sparse_softmax_single_expert():
    w = sparse_softmax(np.array([2.5]), tau=0.99)
    assert w.entries == {0: 1.0}


def test_sparse_softmax_tau_too_large():
    with pytest.raises(ValueError, match="tau too large"):
        sparse_softmax(np.zeros(4), tau=0.25)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=1, max_value=16).flatmap(
        lambda k: st.tuples(
            st.lists(
                st.floats(min_value=-30, max_value=30), min_size=k, max_size=k
            ),
            st.floats(min_value=0, max_value=1.0 / k, exclude_max=True),
        )
    )
)
def test_sparse_softmax_invariants(case):
    logits, tau = case
    z = np.array(logits)
    w = sparse_softmax(z, tau)
    assert w.n_active >= 1
    assert abs(sum(w.entries.values()) - 1.0) <= 1e-9
    p = softmax(z)
    for k in range(len(z)):
        if k not in w.entries:
            assert p[k] <= tau + 1e-12
    assert w.argmax() == int(np.argmax(p))


def test_sparse_softmax_monotone_in_logit():
    z = np.array([0.5, 0.1, -0.2])
    before = sparse_softmax(z, 0.0).entries[0]
    z[0] += 0.3
    after = sparse_softmax(z, 0.0).entries[0]
    assert after >= before


def test_route_sharp_beta_one_hot():
    centroids = random_unit_vectors(6, 16, 0)
    catalog = FakeCatalog(centroids)
    cfg = RoutingConfig(beta=1e-3, tau=0.0)
    w = route(centroids[4], catalog, cfg)
    assert w.entries[4] > 1 - 1e-6


def test_route_flat_beta_uniform():
    centroids = random_unit_vectors(5, 8, 1)
    catalog = FakeCatalog(centroids)
    w = route(centroids[0], catalog, RoutingConfig(beta=1e9, tau=0.0))
    for k in range(5):
        assert w.entries[k] == pytest.approx(0.2, abs=1e-9)


def test_route_permutation_equivariance():
    centroids = random_unit_vectors(7, 12, 2)
    query = random_unit_vectors(1, 12, 3)[0]
    cfg = RoutingConfig(beta=0.1, tau=0.0)
    w = route(query, FakeCatalog(centroids), cfg)
    perm = np.array([3, 0, 6, 1, 5, 2, 4])
    w_perm = route(query, FakeCatalog(centroids[perm]), cfg)
    for new_id, old_id in enumerate(perm):
        assert w_perm.entries[new_id] == pytest.approx(w.entries[old_id], rel=1e-12)


def test_route_batch_matches_loop():
    centroids = random_unit_vectors(16, 24, 4)
    queries = random_unit_vectors(5, 24, 5)
    catalog = FakeCatalog(centroids)
    cfg = RoutingConfig(beta=0.05, tau=0.01)
    batch = route_batch(queries, catalog, cfg)
    for q, w in zip(queries, batch):
        single = route(q, catalog, cfg)
        assert set(w.entries) == set(single.entries)
        for k in w.entries:
            assert w.entries[k] == pytest.approx(single.entries[k], abs=1e-12)


def test_route_batch_duplicates_and_single():
    centroids = random_unit_vectors(4, 8, 6)
    q = random_unit_vectors(1, 8, 7)[0]
    catalog = FakeCatalog(centroids)
    cfg = RoutingConfig(beta=0.1, tau=0.0)
    batch = route_batch(np.stack([q, q]), catalog, cfg)
    assert batch[0].entries == batch[1].entries
    assert route_batch(np.stack([q]), catalog, cfg)[0].entries == route(q, catalog, cfg).entries


def test_route_fixed_n_full_equals_tau_zero():
    centroids = random_unit_vectors(6, 10, 8)
    q = random_unit_vectors(1, 10, 9)[0]
    catalog = FakeCatalog(centroids)
    fixed = route_fixed_n(q, catalog, 6, beta=0.05)
    dynamic = route(q, catalog, RoutingConfig(beta=0.05, tau=0.0))
    for k in range(6):
        assert fixed.entries[k] == pytest.approx(dynamic.entries[k], rel=1e-10)


def test_route_fixed_n_one_hot_and_errors():
    centroids = random_unit_vectors(6, 10, 10)
    q = centroids[2]
    catalog = FakeCatalog(centroids)
    w = route_fixed_n(q, catalog, 1, beta=0.05)
    assert w.entries == {2: 1.0}
    with pytest.raises(ValueError, match="out of range"):
        route_fixed_n(q, catalog, 7, beta=0.05)
    with pytest.raises(ValueError, match="out of range"):
        route_fixed_n(q, catalog, 0, beta=0.05)


def test_route_fixed_n_brute_force():
    centroids = random_unit_vectors(6, 10, 11)
    q = random_unit_vectors(1, 10, 12)[0]
    catalog = FakeCatalog(centroids)
    w = route_fixed_n(q, catalog, 3, beta=0.07)
    sims = centroids.astype(np.float64) @ q.astype(np.float64)
    top3 = sorted(np.argsort(-sims)[:3].tolist())
    assert sorted(w.entries) == top3
    expected = softmax(sims[top3] / 0.07)
    for k, e in zip(top3, expected):
        assert w.entries[k] == pytest.approx(e, rel=1e-10)


def test_uniform_topn():
    centroids = random_unit_vectors(8, 10, 13)
    q = random_unit_vectors(1, 10, 14)[0]
    catalog = FakeCatalog(centroids)
    w1 = weights_uniform_topn(q, catalog, 1)
    assert list(w1.entries.values()) == [1.0]
    w4 = weights_uniform_topn(q, catalog, 4)
    assert all(v == pytest.approx(0.25) for v in w4.entries.values())
    fixed = route_fixed_n(q, catalog, 4, beta=0.05)
    assert set(w4.entries) == set(fixed.entries)
    with pytest.raises(ValueError):
        weights_uniform_topn(q, catalog, 9)


def test_sift_single_candidate():
    centroids = random_unit_vectors(5, 10, 15)
    q = random_unit_vectors(1, 10, 16)[0]
    w = weights_sift(q, FakeCatalog(centroids), SiftConfig(lam=0.1, n_candidates=1))
    assert w.n_active == 1
    assert sum(w.entries.values()) == pytest.approx(1.0, abs=1e-9)


def test_sift_sums_to_one():
    centroids = random_unit_vectors(9, 12, 17)
    q = random_unit_vectors(1, 12, 18)[0]
    w = weights_sift(q, FakeCatalog(centroids), SiftConfig(lam=0.5, n_candidates=6))
    assert sum(w.entries.values()) == pytest.approx(1.0, abs=1e-9)


def test_sift_downweighs_duplicates():
    base_centroids = random_unit_vectors(5, 12, 19)
    q = (0.8 * base_centroids[0] + 0.2 * base_centroids[1]).astype(np.float64)
    q /= np.linalg.norm(q)
    lam = 0.01
    # duplicate centroid 0 and compare its combined weight to the
    # weight it gets in the de-duplicated catalog
    dup = np.concatenate([base_centroids, base_centroids[:1]])
    w_dup = weights_sift(q, FakeCatalog(dup), SiftConfig(lam=lam, n_candidates=6))
    w_ref = weights_sift(q, FakeCatalog(base_centroids), SiftConfig(lam=lam, n_candidates=5))
    combined = w_dup.entries.get(0, 0.0) + w_dup.entries.get(5, 0.0)
    assert combined == pytest.approx(w_ref.entries[0], rel=0.05)


def test_sift_no_reduction_error():
    centroids = np.zeros((2, 4), dtype=np.float32)
    centroids[0, 0] = 1.0
    centroids[1, 1] = 1.0
    q = np.zeros(4, dtype=np.float32)
    q[2] = 1.0  # orthogonal to every candidate
    with pytest.raises(ValueError, match="no uncertainty reduction"):
        weights_sift(q, FakeCatalog(centroids), SiftConfig(lam=0.1, n_candidates=2))


def test_dawin_identical_experts_uniform(small_base):
    adapters = {k: lm.LoraAdapter.init(small_base, rank=2, seed=1) for k in range(4)}
    centroids = random_unit_vectors(4, 8, 20)
    w = weights_dawin("ab", FakeCatalog(centroids), small_base, adapters, beta=0.1, tau=0.0)
    for k in range(4):
        assert w.entries[k] == pytest.approx(0.25, abs=1e-9)


def test_dawin_prefers_low_entropy_expert(small_base):
    vocab = small_base.vocab
    adapters = {k: lm.LoraAdapter.init(small_base, rank=2, seed=1) for k in range(3)}
    # expert 1 gets a near-deterministic output head: huge delta toward 'a'
    a = np.ones((1, small_base.hidden), dtype=np.float32)
    b = np.full((vocab.size, 1), -50.0, dtype=np.float32)
    b[vocab.index("a"), 0] = 50.0
    adapters[1] = lm.LoraAdapter(factors={"out_proj": (a, b)}, rank=1, alpha=1.0)
    centroids = random_unit_vectors(3, 8, 21)
    w = weights_dawin("ab", FakeCatalog(centroids), small_base, adapters, beta=1e-3, tau=0.0)
    assert w.entries[1] > 0.99
    assert sum(w.entries.values()) == pytest.approx(1.0, abs=1e-9)


def test_dawin_missing_adapter(small_base):
    centroids = random_unit_vectors(2, 8, 22)
    with pytest.raises(KeyError, match="missing adapter"):
        weights_dawin("ab", FakeCatalog(centroids), small_base, {0: None}, 0.1, 0.0)


def test_rbf_equivalence():
    rng = np.random.default_rng(23)
    for beta in (0.01, 0.1, 1.0):
        for trial in range(20):
            centroids = random_unit_vectors(8, 16, 100 + trial)
            q = random_unit_vectors(1, 16, 200 + trial)[0]
            attention = softmax(
                centroids.astype(np.float64) @ q.astype(np.float64) / beta
            )
            rbf = rbf_weights(q, centroids, beta)
            assert np.max(np.abs(attention - rbf)) <= 1e-6


def test_argmax_matches_nearest_centroid():
    centroids = random_unit_vectors(10, 16, 24)
    q = random_unit_vectors(1, 16, 25)[0]
    w = route(q, FakeCatalog(centroids), RoutingConfig(beta=0.05, tau=0.01))
    sims = centroids.astype(np.float64) @ q.astype(np.float64)
    assert w.argmax() == int(np.argmax(sims))


def test_routing_config_validation():
    with pytest.raises(ValueError):
        RoutingConfig(beta=0.0)
    with pytest.raises(ValueError):
        RoutingConfig(tau=-0.1)
    with pytest.raises(ValueError):
        RoutingConfig(weighting="magic")
    with pytest.raises(ValueError):
        SiftConfig(lam=0.0)
