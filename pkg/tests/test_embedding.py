import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcbroadcast.embedding import (CoordinateEmbedding, LatencyMatrix, bootstrap_solve,
                                   centralized_vivaldi_update, embedding_objective,
                                   emit_deltas, gradient_steps, init_coords,
                                   objective_gradient)
from vcbroadcast.signing import ControllerSigner


def exact_instance(n, seed, side=200.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, side, (n, 3))
    I, J = np.triu_indices(n, 1)
    return X, I, J, np.linalg.norm(X[I] - X[J], axis=1)


def direct_objective(X, pairs):
    total = 0.0
    for (u, v), l in pairs.items():
        d = sum((X[u][k] - X[v][k]) ** 2 for k in range(3)) ** 0.5
        total += (1.0 / l ** 2) * (d - l) ** 2
    return total


def test_matrix_ring_buffer():
    M = LatencyMatrix(8)
    M.ingest(1, 2, 50.0, 0.0)
    assert M.observations(2, 1) == [50.0]
    for i in range(8):
        M.ingest(1, 2, 60.0 + i, float(i))
    obs = M.observations(1, 2)
    assert len(obs) == 8 and 50.0 not in obs
    assert obs[0] == 60.0 and obs[-1] == 67.0


def test_matrix_uses_minimum_and_rejects_malformed():
    M = LatencyMatrix(4)
    for d in (40.0, 35.0, 90.0):
        M.ingest(0, 3, d, 0.0)
    I, J, L = M.arrays()
    assert (I[0], J[0], L[0]) == (0, 3, 35.0)
    with pytest.raises(ValueError):
        M.ingest(0, 1, -1.0, 0.0)


def test_forged_observation_enters_matrix():
    M = LatencyMatrix()
    M.ingest(0, 1, 10_000.0, 0.0)
    assert M.observations(0, 1) == [10_000.0]


def test_eviction_by_age():
    M = LatencyMatrix()
    M.ingest(0, 1, 10.0, 0.0)
    M.ingest(0, 2, 10.0, 5000.0)
    M.evict_before(1000.0)
    I, J, L = M.arrays()
    assert list(zip(I.tolist(), J.tolist())) == [(0, 2)]


def test_objective_hand_values():
    X, I, J, L = exact_instance(6, 0)
    assert embedding_objective(X, I, J, L) == pytest.approx(0.0, abs=1e-20)
    X2 = np.array([[0.0, 0, 0], [110.0, 0, 0]])
    assert embedding_objective(X2, [0], [1], [100.0]) == pytest.approx(0.01)


def test_objective_matches_direct_summation():
    rng = np.random.default_rng(3)
    X = rng.normal(0, 50, (10, 3))
    I, J = np.triu_indices(10, 1)
    L = rng.uniform(5, 150, len(I))
    pairs = {(int(u), int(v)): float(l) for u, v, l in zip(I, J, L)}
    assert embedding_objective(X, I, J, L) == pytest.approx(direct_objective(X.tolist(), pairs),
                                                            rel=1e-9)


def test_zero_latency_pairs_excluded():
    X = np.array([[0.0, 0, 0], [10.0, 0, 0], [20.0, 0, 0]])
    assert embedding_objective(X, [0, 1], [1, 2], [0.0, 10.0]) == 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 50, (10, 3))
    I, J = np.triu_indices(10, 1)
    L = rng.uniform(5, 150, len(I))
    g = objective_gradient(X, I, J, L)
    h = 1e-5
    num = np.zeros_like(X)
    for a in range(10):
        for b in range(3):
            E = np.zeros_like(X)
            E[a, b] = h
            num[a, b] = (embedding_objective(X + E, I, J, L)
                         - embedding_objective(X - E, I, J, L)) / (2 * h)
    assert np.linalg.norm(g - num) <= 1e-5 * np.linalg.norm(num)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 30))
def test_update_never_increases_objective(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 40, (n, 3))
    I, J = np.triu_indices(n, 1)
    L = rng.uniform(5, 150, len(I))
    Y, _ = centralized_vivaldi_update(X, (I, J, L))
    assert embedding_objective(Y, I, J, L) <= embedding_objective(X, I, J, L)


def test_exact_embedding_is_fixed_point():
    X, I, J, L = exact_instance(20, 1)
    Y, deltas = centralized_vivaldi_update(X, (I, J, L))
    assert deltas == []
    assert np.allclose(X, Y)


def test_perturbed_node_moves_back():
    X, I, J, L = exact_instance(20, 2)
    X0 = X.copy()
    X0[4] += [50.0, 0, 0]
    Y = gradient_steps(X0, I, J, L, 2)
    assert np.linalg.norm(Y[4] - X[4]) < np.linalg.norm(X0[4] - X[4])
    assert embedding_objective(Y, I, J, L) < embedding_objective(X0, I, J, L)


def test_delta_threshold_semantics():
    signer = ControllerSigner(b"k" * 32)
    X = np.zeros((4, 3))
    Y = X.copy()
    Y[0, 0] = 4.0  # below
    Y[1, 0] = 5.0  # equal: not emitted
    Y[2, 1] = 5.01
    Y[3, 2] = -30.0
    d = emit_deltas(X, Y, 5.0, 7, signer)
    assert [x.node for x in d] == [2, 3]
    assert all(x.magnitude > 5.0 and x.window_id == 7 for x in d)
    assert all(signer.verify_delta(x) for x in d)
    d[0].delta = d[0].delta + 1.0
    assert not signer.verify_delta(d[0])


def test_update_deterministic():
    X, I, J, L = exact_instance(15, 5)
    X0 = X + np.random.default_rng(0).normal(0, 10, X.shape)
    a = centralized_vivaldi_update(X0, (I, J, L))
    b = centralized_vivaldi_update(X0, (I, J, L))
    assert np.array_equal(a[0], b[0])
    assert [d.node for d in a[1]] == [d.node for d in b[1]]


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        centralized_vivaldi_update(np.zeros((2, 3)), LatencyMatrix())


def test_init_near_origin():
    X = init_coords(500, 3)
    assert np.all(np.linalg.norm(X, axis=1) <= 1.0)
    assert np.array_equal(X, init_coords(500, 3))


def test_bootstrap_recovers_exact_instance():
    X, I, J, L = exact_instance(30, 4)
    Y = bootstrap_solve(init_coords(30, 0), I, J, L)
    rel = np.abs(np.linalg.norm(Y[I] - Y[J], axis=1) - L) / L
    assert np.median(rel) < 0.01


def test_estimator_api():
    X, I, J, L = exact_instance(25, 6)
    est = CoordinateEmbedding(random_state=1).fit((I, J, L))
    assert est.transform().shape == (25, 3)
    assert est.score((I, J, L)) > -1e-3
    pred = est.predict(np.c_[I, J])
    assert np.median(np.abs(pred - L) / L) < 0.01
    est.partial_fit((I, J, L))
    assert est.n_windows_ == 2
    with pytest.raises(Exception):
        CoordinateEmbedding().transform()
