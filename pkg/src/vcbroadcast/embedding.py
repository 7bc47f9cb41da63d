"""Controller-side coordinate embedding.

The controller keeps a sparse matrix of recent one-way delay observations
and fits 3-D coordinates by minimising the inverse-square weighted stress

    E(X) = sum_{(u,v) in M} (||x_u - x_v|| - l_uv)^2 / l_uv^2

Each control window runs two nonlinear conjugate-gradient iterations; the
step along direction ``d`` is ``alpha = -g.d / d.Hd`` (``g.g / g.Hg`` on the
first), with ``H d`` a finite-difference Hessian-vector product of the
analytic gradient.  Only nodes that moved by more than ``epsilon_ms``
get a (signed) delta.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._rng import derive_rng
from ._validation import check_coords, check_is_fitted

log = logging.getLogger(__name__)

DIM = 3


class LatencyMatrix:
    """Sparse map ``(u, v) -> last k observations`` (u < v), ring-buffered."""

    def __init__(self, k=8):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._index = {}
        self._pairs = np.empty((0, 2), dtype=np.int64)
        self._vals = np.empty((0, k))
        self._times = np.empty((0, k))
        self._count = np.empty(0, dtype=np.int64)  # total ever written per pair

    def __len__(self):
        return len(self._index)

    def _slot(self, u, v):
        key = (u, v) if u < v else (v, u)
        i = self._index.get(key)
        if i is None:
            i = len(self._index)
            self._index[key] = i
            if i >= len(self._pairs):
                grow = max(16, len(self._pairs))
                self._pairs = np.vstack([self._pairs, np.zeros((grow, 2), dtype=np.int64)])
                self._vals = np.vstack([self._vals, np.full((grow, self.k), np.nan)])
                self._times = np.vstack([self._times, np.full((grow, self.k), np.nan)])
                self._count = np.concatenate([self._count, np.zeros(grow, dtype=np.int64)])
            self._pairs[i] = key
        return i

    def ingest(self, u, v, delay, t):
        """Append one observation; the oldest is overwritten beyond ``k``."""
        if u == v:
            raise ValueError("observation needs two distinct nodes")
        if not np.isfinite(delay) or delay < 0:
            raise ValueError(f"malformed delay {delay!r} for ({u}, {v})")
        i = self._slot(int(u), int(v))
        pos = self._count[i] % self.k
        self._vals[i, pos] = delay
        self._times[i, pos] = t
        self._count[i] += 1
        return self

    def ingest_many(self, us, vs, delays, t):
        us = np.asarray(us, dtype=np.int64)
        vs = np.asarray(vs, dtype=np.int64)
        delays = np.asarray(delays, dtype=float)
        if np.any(~np.isfinite(delays)) or np.any(delays < 0):
            raise ValueError("malformed delay in batch")
        if np.any(us == vs):
            raise ValueError("observation needs two distinct nodes")
        lo, hi = np.minimum(us, vs), np.maximum(us, vs)
        slots = np.array([self._slot(a, b) for a, b in zip(lo.tolist(), hi.tolist())],
                         dtype=np.int64)
        if len(np.unique(slots)) != len(slots):  # repeated pair: keep arrival order
            for i, d in zip(slots.tolist(), delays.tolist()):
                pos = self._count[i] % self.k
                self._vals[i, pos] = d
                self._times[i, pos] = t
                self._count[i] += 1
            return self
        pos = self._count[slots] % self.k
        self._vals[slots, pos] = delays
        self._times[slots, pos] = t
        self._count[slots] += 1
        return self

    def observations(self, u, v):
        """Stored observations for a pair, oldest first."""
        i = self._index.get((min(u, v), max(u, v)))
        if i is None:
            return []
        c = self._count[i]
        order = [(c + j) % self.k for j in range(self.k)] if c >= self.k else range(c)
        return [float(self._vals[i, j]) for j in order if not np.isnan(self._vals[i, j])]

    def evict_before(self, t_cut):
        """Forget observations older than ``t_cut``."""
        m = len(self._index)
        stale = self._times[:m] < t_cut
        self._vals[:m][stale] = np.nan
        self._times[:m][stale] = np.nan

    def arrays(self):
        """``(I, J, L)`` with ``L`` the per-pair minimum stored observation.

        Pairs with nothing stored are left out.
        """
        m = len(self._index)
        vals = self._vals[:m]
        has = ~np.all(np.isnan(vals), axis=1)
        L = np.full(m, np.nan)
        L[has] = np.nanmin(vals[has], axis=1)
        pairs = self._pairs[:m][has]
        return pairs[:, 0].copy(), pairs[:, 1].copy(), L[has]

    def copy(self):
        other = LatencyMatrix(self.k)
        other._index = dict(self._index)
        other._pairs = self._pairs.copy()
        other._vals = self._vals.copy()
        other._times = self._times.copy()
        other._count = self._count.copy()
        return other


def _usable(I, J, L):
    bad = ~(L > 0)
    if np.any(bad):
        log.warning("dropping %d pairs with zero latency from the objective", int(bad.sum()))
        return I[~bad], J[~bad], L[~bad]
    return I, J, L


def embedding_objective(X, I, J, L):
    """Weighted stress of coordinates ``X`` against pair latencies."""
    I, J, L = _usable(np.asarray(I), np.asarray(J), np.asarray(L, dtype=float))
    d = np.linalg.norm(X[I] - X[J], axis=1)
    return float(np.sum(((d - L) / L) ** 2))


def objective_gradient(X, I, J, L):
    """Analytic gradient of :func:`embedding_objective` (same shape as X)."""
    diff = X[I] - X[J]
    d = np.linalg.norm(diff, axis=1)
    safe = np.where(d > 0, d, 1.0)
    # coincident points contribute no direction
    coef = np.where(d > 0, 2.0 * (d - L) / (L * L * safe), 0.0)
    contrib = coef[:, None] * diff
    n = len(X)
    g = np.empty_like(X)
    for k in range(X.shape[1]):
        g[:, k] = (np.bincount(I, contrib[:, k], minlength=n)
                   - np.bincount(J, contrib[:, k], minlength=n))
    return g


def hessian_vector(X, I, J, L, V, rel_step=1e-4):
    """Central finite difference of the gradient along ``V``."""
    vnorm = np.linalg.norm(V)
    if vnorm == 0:
        return np.zeros_like(V)
    scale = max(np.sqrt(np.mean(X * X)) if X.size else 0.0, 1.0)
    h = rel_step * scale
    u = V / vnorm
    gp = objective_gradient(X + h * u, I, J, L)
    gm = objective_gradient(X - h * u, I, J, L)
    return (gp - gm) / (2 * h) * vnorm


@dataclass
class SignedDelta:
    node: int
    delta: np.ndarray
    window_id: int
    auth_tag: bytes = b""

    @property
    def magnitude(self):
        return float(np.linalg.norm(self.delta))


def gradient_steps(X, I, J, L, iterations=2, fallback_step=1e-3):
    """Nonlinear conjugate-gradient iterations on the weighted stress.

    The first direction is ``-g`` with ``alpha = g.g / g.Hg``; later ones are
    Fletcher-Reeves conjugate directions ``d = -g + beta d_prev`` with
    ``alpha = g.g / d.Hd``.  A step that would raise the objective is halved
    until it does not; non-positive curvature falls back to a small fixed
    step.
    """
    I, J, L = _usable(np.asarray(I), np.asarray(J), np.asarray(L, dtype=float))
    X = np.array(X, dtype=float, copy=True)
    if len(I) == 0:
        return X
    f = embedding_objective(X, I, J, L)
    d = None
    gg_prev = None
    for _ in range(iterations):
        g = objective_gradient(X, I, J, L)
        gg = float(np.sum(g * g))
        if gg == 0.0:
            break
        d = -g if d is None else -g + (gg / gg_prev) * d
        if float(np.sum(g * d)) >= 0:  # lost descent, restart
            d = -g
        dHd = float(np.sum(d * hessian_vector(X, I, J, L, d)))
        if not np.isfinite(dHd) or dHd <= 0:
            log.info("non-positive curvature %.3g, using fallback step", dHd)
            alpha = fallback_step
        else:
            alpha = -float(np.sum(g * d)) / dHd
        gg_prev = gg
        for _ in range(30):
            cand = X + alpha * d
            fc = embedding_objective(cand, I, J, L)
            if fc <= f:
                X, f = cand, fc
                break
            alpha *= 0.5
        else:
            break
    return X


def centralized_vivaldi_update(X_prev, M, epsilon_ms=5.0, window_id=0, signer=None,
                               iterations=2):
    """Two gradient iterations on the stored matrix, then threshold the moves.

    ``M`` is a :class:`LatencyMatrix` or an ``(I, J, L)`` triple.  Returns
    ``(X_new, deltas)`` where ``deltas`` only holds nodes that moved by more
    than ``epsilon_ms``.
    """
    I, J, L = M.arrays() if isinstance(M, LatencyMatrix) else M
    if len(I) == 0:
        raise ValueError("latency matrix is empty")
    X_prev = check_coords(X_prev)
    X = gradient_steps(X_prev, I, J, L, iterations=iterations)
    return X, emit_deltas(X_prev, X, epsilon_ms, window_id, signer)


def emit_deltas(X_prev, X_new, epsilon_ms, window_id, signer=None):
    moves = X_new - X_prev
    mags = np.linalg.norm(moves, axis=1)
    out = []
    for v in np.flatnonzero(mags > epsilon_ms):
        d = SignedDelta(int(v), moves[v].copy(), window_id)
        if signer is not None:
            d.auth_tag = signer.sign_delta(d)
        out.append(d)
    return out


def relative_errors(X, I, J, L):
    d = np.linalg.norm(X[I] - X[J], axis=1)
    return np.abs(d - L) / L


def node_median_errors(X, I, J, L, n=None):
    """Median relative prediction error per node over its measured pairs."""
    n = len(X) if n is None else n
    rel = relative_errors(X, I, J, L)
    nodes = np.concatenate([I, J])
    errs = np.concatenate([rel, rel])
    order = np.lexsort((errs, nodes))
    nodes, errs = nodes[order], errs[order]
    out = np.full(n, np.inf)
    starts = np.searchsorted(nodes, np.arange(n), side="left")
    ends = np.searchsorted(nodes, np.arange(n), side="right")
    for v in np.flatnonzero(ends > starts):
        out[v] = float(np.median(errs[starts[v]:ends[v]]))
    return out


def init_coords(n, seed, radius=1.0):
    """Seeded points uniformly inside a small ball around the origin."""
    rng = derive_rng(seed, "controller", "init")
    v = rng.normal(size=(n, DIM))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(0, 1, n) ** (1 / DIM)
    return v * r[:, None]


def bootstrap_solve(X0, I, J, L, max_iter=300):
    """Full global solve used the first time a controller sees the network."""
    I, J, L = _usable(np.asarray(I), np.asarray(J), np.asarray(L, dtype=float))
    shape = X0.shape

    def fun(flat):
        X = flat.reshape(shape)
        return embedding_objective(X, I, J, L), objective_gradient(X, I, J, L).ravel()

    res = minimize(fun, X0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-9})
    return res.x.reshape(shape)


class CoordinateEmbedding(BaseEstimator):
    """Estimator wrapper around the controller embedding.

    ``fit`` does a full solve from a seeded near-origin start; ``partial_fit``
    runs one control window (two gradient iterations) from the current
    coordinates and records the supra-threshold deltas in ``deltas_``.
    """

    def __init__(self, n_nodes=None, iterations=2, epsilon_ms=5.0, bootstrap=True,
                 random_state=0):
        self.n_nodes = n_nodes
        self.iterations = iterations
        self.epsilon_ms = epsilon_ms
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _triple(self, M):
        if isinstance(M, LatencyMatrix):
            return M.arrays()
        I, J, L = M
        return np.asarray(I), np.asarray(J), np.asarray(L, dtype=float)

    def _n(self, I, J):
        return self.n_nodes if self.n_nodes is not None else int(max(I.max(), J.max())) + 1

    def fit(self, M, y=None):
        I, J, L = self._triple(M)
        X0 = init_coords(self._n(I, J), self.random_state)
        if self.bootstrap:
            self.coords_ = bootstrap_solve(X0, I, J, L)
        else:
            self.coords_ = gradient_steps(X0, I, J, L, self.iterations)
        self.deltas_ = emit_deltas(X0, self.coords_, self.epsilon_ms, 0)
        self.n_windows_ = 1
        return self

    def partial_fit(self, M, y=None):
        if not hasattr(self, "coords_"):
            I, J, L = self._triple(M)
            self.coords_ = init_coords(self._n(I, J), self.random_state)
            self.n_windows_ = 0
        self.coords_, self.deltas_ = centralized_vivaldi_update(
            self.coords_, self._triple(M), self.epsilon_ms, self.n_windows_,
            iterations=self.iterations)
        self.n_windows_ += 1
        return self

    def transform(self, X=None):
        check_is_fitted(self, "coords_")
        return self.coords_ if X is None else self.coords_[np.asarray(X)]

    def predict(self, pairs):
        """Predicted one-way delay for each ``(u, v)`` row."""
        check_is_fitted(self, "coords_")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.linalg.norm(self.coords_[pairs[:, 0]] - self.coords_[pairs[:, 1]], axis=1)

    def score(self, M, y=None):
        check_is_fitted(self, "coords_")
        return -embedding_objective(self.coords_, *self._triple(M))
