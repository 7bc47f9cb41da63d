"""The logically centralised controller and its per-window pipeline."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import safeguards as sg
from ._rng import derive_rng
from .cluster import build_relay_tables, default_k, encode_relay_table, kmeans_cluster
from .dissemination import mark_congested
from .embedding import (LatencyMatrix, bootstrap_solve, emit_deltas, gradient_steps,
                        init_coords, node_median_errors)
from .signing import DELTA_BYTES, HEARTBEAT_BYTES, ControllerSigner

log = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    theta_ms: float = 2000.0
    epsilon_ms: float = 5.0
    k_observations: int = 8
    e_stable: float = sg.E_STABLE
    f_c_ms: float = sg.F_C_MS
    f_max_ms: float = sg.F_MAX_MS
    mad_k: float = sg.MAD_K
    force_window: int = sg.WINDOW
    min_history: int = sg.MIN_HISTORY
    mad_floor_ms: float = sg.MAD_FLOOR_MS
    t_drift_ms: float = sg.T_DRIFT_MS
    rho: float = sg.RHO
    window_reject_fraction: float = 0.30
    centroid_sample: int = 128
    bootstrap_iter: int = 60
    iterations: int = 2
    k_override: int = None
    d_near: int = 6
    d_far: int = None  # None: d_max - d_near
    d_max: int = 10
    congestion_mode: str = "percentile"
    congestion_percentile: float = 70.0
    utilization_threshold: float = 0.70
    halt_at_ms: float = None  # controller goes silent from here on

    def __post_init__(self):
        if self.d_far is None:
            self.d_far = self.d_max - self.d_near
        if self.d_near < 0 or self.d_far < 0:
            raise ValueError("d_near and d_far must be >= 0")
        if self.d_near + self.d_far > self.d_max:
            raise ValueError(f"d_near + d_far = {self.d_near + self.d_far} exceeds "
                             f"d_max = {self.d_max}")
        if self.theta_ms <= 0:
            raise ValueError("theta_ms must be positive")


@dataclass
class TickResult:
    window_id: int
    t_ms: float
    discarded: bool
    deltas: list = field(default_factory=list)
    tables: list = field(default_factory=list)  # changed tables only
    congested: frozenset = frozenset()
    n_samples: int = 0
    n_rejected: int = 0
    control_bytes: int = 0
    blacklisted: int = None


class Controller:
    """Owns the latency matrix, coordinates, safeguards and relay tables.

    ``tick`` consumes one window of delay telemetry (one sample per listed
    edge) and returns what the controller sends out.
    """

    def __init__(self, overlay, cfg=None, seed=0, signer=None):
        self.overlay = overlay
        self.cfg = cfg or ControllerConfig()
        self.seed = seed
        self.signer = signer or ControllerSigner.from_seed(seed)
        n = overlay.n
        self.X = init_coords(n, seed)
        self.M = LatencyMatrix(self.cfg.k_observations)
        self.history = sg.ForceHistory(n, self.cfg.force_window)
        self.err = np.full(n, np.inf)
        self.assignment = None
        self.tables = [None] * n
        self.window_id = 0
        self.bootstrapped = False
        self.congested = frozenset()
        self.discarded_windows = 0
        self._rng = derive_rng(seed, "controller", "centroid")

    @property
    def k(self):
        return self.cfg.k_override or default_k(self.overlay.n)

    def halted(self, t_ms):
        return self.cfg.halt_at_ms is not None and t_ms >= self.cfg.halt_at_ms

    # state snapshot used by the window-discard guarantee
    def snapshot(self):
        return (self.X.copy(), list(self.tables), self.window_id)

    def tick(self, t_ms, I, J, delays, queue=None, utilization=None):
        """Run one window: filter, embed, guard, cluster, emit."""
        cfg = self.cfg
        self.window_id += 1
        wid = self.window_id
        I = np.asarray(I, dtype=np.int64)
        J = np.asarray(J, dtype=np.int64)
        delays = np.asarray(delays, dtype=float)
        n_samples = len(I)

        if self.bootstrapped:
            d = np.linalg.norm(self.X[I] - self.X[J], axis=1)
            mags = np.abs(d - delays)
            # judge every sample at both ends against start-of-window history
            ok_i, clip = sg.filter_forces(self.history, I, J, mags, cfg.f_max_ms, cfg.mad_k,
                                          cfg.min_history, cfg.mad_floor_ms, commit=False)
            ok_j, _ = sg.filter_forces(self.history, J, I, mags, cfg.f_max_ms, cfg.mad_k,
                                       cfg.min_history, cfg.mad_floor_ms, commit=False)
            ok = ok_i & ok_j
            if self.history.blacklist:
                bl = np.isin(I, list(self.history.blacklist)) | np.isin(
                    J, list(self.history.blacklist))
                considered = ~bl
                ok &= considered
            else:
                considered = np.ones(n_samples, dtype=bool)
            n_considered = int(considered.sum())
            n_rej = int((considered & ~ok).sum())
            if n_considered and n_rej > cfg.window_reject_fraction * n_considered:
                self.discarded_windows += 1
                log.info("window %d discarded: %d/%d samples rejected", wid, n_rej,
                         n_considered)
                return TickResult(wid, t_ms, True, n_samples=n_samples, n_rejected=n_rej,
                                  congested=self.congested,
                                  control_bytes=HEARTBEAT_BYTES * self.overlay.n)
            self.history.append_many(np.concatenate([I[ok], J[ok]]),
                                     np.concatenate([clip[ok], clip[ok]]))
            for v, u in zip(I[considered & ~ok_i].tolist(), J[considered & ~ok_i].tolist()):
                self.history.flag(v, u)
            for v, u in zip(J[considered & ~ok_j].tolist(), I[considered & ~ok_j].tolist()):
                self.history.flag(v, u)
        else:
            ok = np.ones(n_samples, dtype=bool)
            n_rej = 0

        self.M.ingest_many(I[ok], J[ok], delays[ok], t_ms)
        self.M.evict_before(t_ms - 3 * cfg.theta_ms)
        mi, mj, ml = self.M.arrays()
        X_prev = self.X
        blacklisted = None
        if not self.bootstrapped:
            X_new = bootstrap_solve(X_prev, mi, mj, ml, max_iter=cfg.bootstrap_iter)
            self.bootstrapped = True
        else:
            X_new = gradient_steps(X_prev, mi, mj, ml, iterations=cfg.iterations)
            shifts, refused = sg.apply_stability_caps(self.err, X_new - X_prev,
                                                      cfg.e_stable, cfg.f_c_ms)
            if refused.any():
                self._flag_pushers(np.flatnonzero(refused), mi, mj, ml, X_prev)
            X_new = sg.apply_gravity(X_prev + shifts, cfg.rho)
            blacklisted = self._centroid_check(X_new, mi, mj, ml)
        self.X = X_new
        self.err = node_median_errors(X_new, mi, mj, ml, self.overlay.n)
        deltas = emit_deltas(X_prev, X_new, cfg.epsilon_ms, wid, self.signer)
        changed = self._refresh_tables(wid)
        self.congested = mark_congested(queue, cfg.congestion_percentile,
                                        mode=cfg.congestion_mode, utilization=utilization,
                                        threshold=cfg.utilization_threshold)
        nbytes = (HEARTBEAT_BYTES * self.overlay.n + DELTA_BYTES * len(deltas)
                  + sum(len(encode_relay_table(t)) for t in changed))
        return TickResult(wid, t_ms, False, deltas, changed, self.congested, n_samples,
                          n_rej, nbytes, blacklisted)

    def _flag_pushers(self, nodes, I, J, L, X):
        """Flag the peer with the largest residual on each refused node."""
        d = np.linalg.norm(X[I] - X[J], axis=1)
        r = np.abs(d - L)
        for v in nodes.tolist():
            sel = np.flatnonzero((I == v) | (J == v))
            if len(sel):
                e = sel[np.argmax(r[sel])]
                self.history.flag(v, int(J[e] if I[e] == v else I[e]))

    def _centroid_check(self, X, I, J, L):
        n = len(X)
        m = min(self.cfg.centroid_sample, n)
        sample = self._rng.choice(n, size=m, replace=False)
        centroid = X[sample].mean(axis=0)
        if np.linalg.norm(centroid) <= self.cfg.t_drift_ms:
            return None
        # force exerted by each node on its pair partners, projected on the drift
        u = centroid / np.linalg.norm(centroid)
        diff = X[J] - X[I]
        dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-9)
        unit = diff / dist[:, None]
        r = dist - L  # positive: the pair is stretched and pulls together
        push_by_j = r * (unit @ u)  # j pulls i along +unit
        push_by_i = -r * (unit @ u)
        exerted = (np.bincount(J, push_by_j, minlength=n)
                   + np.bincount(I, push_by_i, minlength=n))
        chk = sg.centroid_drift_check(X[sample], self.cfg.t_drift_ms,
                                      sources=np.arange(n), forces=np.outer(exerted, u))
        culprit = chk.blacklist
        self.history.blacklist.add(culprit)
        log.info("centroid drift %.1f ms, blacklisting node %d",
                 float(np.linalg.norm(centroid)), culprit)
        return culprit

    def _refresh_tables(self, wid):
        cfg = self.cfg
        init = self.assignment.centroids if self.assignment is not None else None
        self.assignment = kmeans_cluster(self.X, self.k, self.seed, init=init)
        fresh = build_relay_tables(self.assignment, self.X, self.overlay, cfg.d_near,
                                   cfg.d_far, self.seed, version=wid)
        changed = []
        for v, t in enumerate(fresh):
            if not t.same_content(self.tables[v]):
                t.auth_tag = self.signer.sign_table(t)
                self.tables[v] = t
                changed.append(t)
        return changed
