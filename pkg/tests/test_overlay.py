from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcbroadcast.overlay import (CongestionEpisode, LatencyField, Overlay, OverlayError,
                                 build_overlay, generate_geo_latency, sample_latency,
                                 tx_transfer_time)


def bfs_reachable(n, edges, src=0):
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = {src}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                q.append(v)
    return seen


def line_field(prop=100.0, mu=0.0, sigma=0.0, episodes=()):
    ov = Overlay(2, [(0, 1)])
    return LatencyField(ov, np.array([prop]), np.zeros(2), jitter_mu=mu, jitter_sigma=sigma,
                        episodes=list(episodes))


def test_small_graph_is_complete():
    ov = build_overlay(4, 64, seed=7)
    assert ov.n_edges == 6
    assert all(ov.degree(v) == 3 for v in range(4))


def test_default_cap_on_1000_nodes():
    ov = build_overlay(1000, 64, seed=1)
    assert max(ov.degree(v) for v in range(ov.n)) <= 64
    assert ov.is_connected()


def test_connected_by_bfs_oracle():
    ov = build_overlay(50, 8, seed=3)
    assert len(bfs_reachable(50, ov.edges.tolist())) == 50
    assert max(ov.degree(v) for v in range(50)) <= 8


@pytest.mark.parametrize("n,cap", [(1, 64), (10, 1)])
def test_rejects_degenerate_sizes(n, cap):
    with pytest.raises(OverlayError):
        build_overlay(n, cap)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 80), cap=st.integers(2, 12), seed=st.integers(0, 2**31))
def test_overlay_invariants(n, cap, seed):
    ov = build_overlay(n, cap, seed)
    e = ov.edges
    assert np.all(e[:, 0] < e[:, 1])  # no self loops, canonical order
    assert len({tuple(x) for x in e.tolist()}) == len(e)
    assert max(ov.degree(v) for v in range(n)) <= cap
    assert len(bfs_reachable(n, e.tolist())) == n
    for v in range(n):
        for p in ov.peers[v]:
            assert v in ov.peers[p]
    again = build_overlay(n, cap, seed)
    assert np.array_equal(e, again.edges)


def test_single_continent_ratio_is_one():
    ov = build_overlay(200, 16, seed=2)
    f = generate_geo_latency(ov, k_continents=1, seed=2)
    assert np.all(f.labels == 0)
    assert f.prop.min() >= 10.0 and f.prop.max() <= 60.0


def test_continental_ratio_in_band():
    ov = build_overlay(1000, 64, seed=0)
    f = generate_geo_latency(ov, 3, (10, 60), (2, 5), seed=0)
    same = f.labels[ov.edges[:, 0]] == f.labels[ov.edges[:, 1]]
    ratio = f.prop[~same].mean() / f.prop[same].mean()
    assert 2.0 <= ratio <= 5.0
    assert f.prop[same].max() < f.prop[~same].min()
    assert sorted(np.bincount(f.labels).tolist()) == [333, 333, 334]


def test_rejects_inverted_multiplier():
    ov = build_overlay(20, 8, seed=0)
    with pytest.raises(ValueError):
        generate_geo_latency(ov, 3, (10, 60), (0.5, 2))


def test_geo_field_deterministic():
    ov = build_overlay(300, 16, seed=4)
    a = generate_geo_latency(ov, 3, seed=9, jitter=(5, 2))
    b = generate_geo_latency(ov, 3, seed=9, jitter=(5, 2))
    assert np.array_equal(a.prop, b.prop)
    assert np.array_equal(a.sample_edges(np.arange(ov.n_edges), 0.0),
                          b.sample_edges(np.arange(ov.n_edges), 0.0))


def test_jitter_variance():
    f = line_field(100.0, 50.0, 10.0)
    x = f.sample_edge(0, 0.0, np.random.default_rng(1), size=10_000)
    assert abs(x.var() - 100.0) / 100.0 < 0.15


def test_sample_latency_exact_and_queue():
    assert sample_latency(line_field(), 0, 1, 0.0) == 100.0
    f = line_field(episodes=[CongestionEpisode(0, 1, 0.0, 1000.0, 25.0)])
    assert sample_latency(f, 1, 0, 500.0) == 125.0
    assert sample_latency(f, 0, 1, 1000.0) == 100.0  # episode is half-open


def test_sample_latency_mean():
    f = line_field(100.0, 50.0, 10.0)
    x = [sample_latency(f, 0, 1, 0.0) for _ in range(10_000)]
    assert abs(np.mean(x) - 150.0) < 1.0


def test_sample_latency_rejects_non_edges():
    ov = Overlay(3, [(0, 1), (1, 2)])
    f = LatencyField(ov, np.array([10.0, 20.0]), np.zeros(3))
    with pytest.raises(OverlayError):
        sample_latency(f, 0, 2, 0.0)
    with pytest.raises(OverlayError):
        sample_latency(f, 1, 1, 0.0)


def test_floor_clamps_negative_draws():
    f = line_field(2.0, 0.0, 50.0)
    x = f.sample_edge(0, 0.0, np.random.default_rng(0), size=5000)
    assert x.min() == 1.0


def test_transfer_time():
    f = line_field()
    assert tx_transfer_time(f, 0, 1, 0.0) == 300.0
    assert tx_transfer_time(f, 0, 1, 0.0, body_direct=True) == 100.0
    g = line_field(100.0, 5.0, 2.0)
    x = [tx_transfer_time(g, 0, 1, 0.0) for _ in range(10_000)]
    assert abs(np.mean(x) - 315.0) / 315.0 < 0.02
