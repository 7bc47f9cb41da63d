import numpy as np
import pytest

from vcbroadcast.controller import Controller, ControllerConfig
from vcbroadcast.overlay import build_overlay, generate_geo_latency
from vcbroadcast.signing import HEARTBEAT_BYTES


@pytest.fixture(scope="module")
def geo():
    ov = build_overlay(200, 24, seed=1)
    f = generate_geo_latency(ov, 3, jitter=(0.0, 0.0), seed=1)
    return ov, f


def tick(ctrl, f, t, delays=None):
    I, J = ctrl.overlay.edges[:, 0], ctrl.overlay.edges[:, 1]
    d = f.prop if delays is None else delays
    return ctrl.tick(t, I, J, d, queue=np.zeros(len(I)))


def test_config_validation():
    assert ControllerConfig().d_far == 4
    with pytest.raises(ValueError):
        ControllerConfig(d_near=8, d_far=5)
    with pytest.raises(ValueError):
        ControllerConfig(theta_ms=0)


def test_bootstrap_then_tables(geo):
    ov, f = geo
    ctrl = Controller(ov, ControllerConfig(k_override=6), seed=0)
    r = tick(ctrl, f, 2000.0)
    assert not r.discarded and r.window_id == 1
    assert len(r.tables) == ov.n  # every table is new
    assert all(ctrl.signer.verify_table(t) for t in r.tables)
    assert all(set(t.entries) <= set(ov.peers[t.owner].tolist()) for t in r.tables)
    assert r.control_bytes >= HEARTBEAT_BYTES * ov.n
    I, J = ov.edges[:, 0], ov.edges[:, 1]
    rel = np.abs(np.linalg.norm(ctrl.X[I] - ctrl.X[J], axis=1) - f.prop) / f.prop
    assert np.median(rel) < 0.10


def test_steady_window_changes_little(geo):
    ov, f = geo
    ctrl = Controller(ov, ControllerConfig(k_override=6), seed=0)
    tick(ctrl, f, 2000.0)
    r = tick(ctrl, f, 4000.0)
    assert not r.discarded and r.n_rejected == 0
    assert len(r.tables) < ov.n


def test_discarded_window_leaves_state(geo):
    ov, f = geo
    ctrl = Controller(ov, ControllerConfig(k_override=6, min_history=1), seed=0)
    for w in range(4):
        tick(ctrl, f, 2000.0 * (w + 1))
    X, tables, wid = ctrl.snapshot()
    r = tick(ctrl, f, 10_000.0, delays=f.prop + 5000.0)
    assert r.discarded and r.tables == [] and r.deltas == []
    assert r.control_bytes == HEARTBEAT_BYTES * ov.n
    assert np.array_equal(ctrl.X, X) and ctrl.tables == tables
    assert ctrl.window_id == wid + 1 and ctrl.discarded_windows == 1


def test_congestion_flags(geo):
    ov, f = geo
    ctrl = Controller(ov, ControllerConfig(k_override=6), seed=0)
    q = np.zeros(ov.n_edges)
    q[5] = 200.0
    r = ctrl.tick(2000.0, ov.edges[:, 0], ov.edges[:, 1], f.prop, queue=q)
    assert r.congested == {5}


def test_halt():
    ov = build_overlay(20, 8, seed=0)
    ctrl = Controller(ov, ControllerConfig(halt_at_ms=10_000.0))
    assert not ctrl.halted(9_999.0) and ctrl.halted(10_000.0)
    assert not Controller(ov).halted(1e12)


def test_deterministic(geo):
    ov, f = geo
    a = Controller(ov, ControllerConfig(k_override=6), seed=3)
    b = Controller(ov, ControllerConfig(k_override=6), seed=3)
    for t in (2000.0, 4000.0):
        ra, rb = tick(a, f, t), tick(b, f, t)
        assert ra.control_bytes == rb.control_bytes
    assert np.array_equal(a.X, b.X)
    assert [t.entries for t in a.tables] == [t.entries for t in b.tables]
