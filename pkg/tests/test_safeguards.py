import numpy as np
import pytest
from hypothesis import given, strategies as st

from vcbroadcast import safeguards as sg


def seeded_history(values, n=2, node=0):
    h = sg.ForceHistory(n)
    for v in values:
        h.append(node, v)
    return h


def history_20_5():
    # median 20, MAD 5
    return seeded_history([15, 15, 15, 20, 20, 20, 25, 25, 25])


def test_clip_at_f_max():
    assert sg.clip_force(150.0) == 100.0
    assert sg.clip_force(100.0) == 100.0
    v = sg.clip_force(np.array([300.0, 400.0, 0.0]))
    assert np.allclose(v, [60.0, 80.0, 0.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_clip_idempotent(f):
    once = sg.clip_force(np.array(f))
    assert np.allclose(sg.clip_force(once), once)
    assert np.linalg.norm(once) <= 100.0 + 1e-9


def test_reject_after_clipping():
    h = history_20_5()
    vals = h.values(0)
    assert np.median(vals) == 20 and np.median(np.abs(vals - 20)) == 5
    r = sg.filter_force(h, 0, 1, 150.0)
    assert not r.accepted and float(r.force) == 100.0
    assert h.flags[(0, 1)] == 1


def test_mad_boundary():
    # threshold is median + 8 * MAD = 60; strictly greater rejects
    h = history_20_5()
    assert sg.filter_force(h, 0, 1, 60.0).accepted
    h = history_20_5()
    assert not sg.filter_force(h, 0, 1, 60.001).accepted


def test_zero_force_accepted():
    assert sg.filter_force(history_20_5(), 0, 1, 0.0).accepted


def test_blacklisted_neighbor_rejected():
    h = history_20_5()
    h.blacklist.add(1)
    assert not sg.filter_force(h, 0, 1, 1.0).accepted


def test_nonfinite_force_rejected_as_malformed():
    with pytest.raises(ValueError):
        sg.filter_force(sg.ForceHistory(2), 0, 1, np.nan)


def test_adversarial_rejection_over_1000_samples():
    rng = np.random.default_rng(1)
    h = sg.ForceHistory(2)
    for x in rng.uniform(15, 25, 32):
        h.append(0, x)
    n_adv = rej = 0
    for _ in range(1000):
        if rng.random() < 0.5:
            sg.filter_force(h, 0, 1, float(rng.uniform(15, 25)))
        else:
            n_adv += 1
            rej += not sg.filter_force(h, 0, 1, 500.0).accepted
    assert rej / n_adv >= 0.99


def test_vectorised_filter_matches_thresholds():
    h = history_20_5()
    ok, clipped = sg.filter_forces(h, [0, 0, 0], [1, 1, 1], [10.0, 60.0, 150.0],
                                   commit=False)
    assert ok.tolist() == [True, True, False]
    assert clipped.tolist() == [10.0, 60.0, 100.0]


def test_stability_cap_boundaries():
    s, refused = sg.apply_stability_cap(0.40, [120.0, 0, 0])
    assert not refused and s[0] == 120.0
    s, refused = sg.apply_stability_cap(0.10, [80.0, 0, 0])
    assert refused and np.all(s == 0)
    s, refused = sg.apply_stability_cap(0.10, [0.0, 0, 0])
    assert not refused and np.all(s == 0)
    # 75 ms exactly passes, e = 0.30 exactly is not yet stable
    assert not sg.apply_stability_cap(0.10, [75.0, 0, 0])[1]
    assert not sg.apply_stability_cap(0.30, [80.0, 0, 0])[1]


def test_stability_caps_rowwise():
    out, refused = sg.apply_stability_caps([0.1, 0.5, 0.1],
                                           np.array([[80.0, 0, 0], [80.0, 0, 0], [5, 0, 0]]))
    assert refused.tolist() == [True, False, False]
    assert out[0].tolist() == [0, 0, 0] and out[1, 0] == 80.0


@pytest.mark.parametrize("r,g", [(0.0, 0.0), (500.0, 1.0), (250.0, 0.25)])
def test_gravity(r, g):
    assert sg.gravity_term([r, 0.0, 0.0]) == pytest.approx(g)


def test_gravity_pull_direction():
    X = np.array([[500.0, 0, 0], [0.0, 0, 0]])
    Y = sg.apply_gravity(X)
    assert Y[0].tolist() == [499.0, 0, 0]
    assert Y[1].tolist() == [0, 0, 0]


def test_centroid_symmetric_ok():
    pts = np.array([[10.0, 0, 0], [-10.0, 0, 0], [0, 5, 0], [0, -5, 0]])
    assert sg.centroid_drift_check(pts).ok


def test_centroid_drift_blacklists():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (20, 3))
    pts -= pts.mean(axis=0)
    pts[:, 0] += 60.0
    pts[7, 0] += 30.0
    chk = sg.centroid_drift_check(pts)
    assert not chk.ok and chk.blacklist == 7


def test_centroid_boundary():
    pts = np.array([[49.0, 0, 0], [49.0, 0, 0]])
    assert sg.centroid_drift_check(pts).ok
    assert sg.centroid_drift_check(pts + [1.0, 0, 0]).ok  # exactly 50 is not beyond
    assert not sg.centroid_drift_check(pts + [1.001, 0, 0]).ok


def test_centroid_empty_rejected():
    with pytest.raises(ValueError):
        sg.centroid_drift_check(np.empty((0, 3)))
