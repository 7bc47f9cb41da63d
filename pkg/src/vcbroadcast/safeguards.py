"""Anti-forgery safeguards applied around each controller window.

* force restriction: clip at ``f_max`` then drop forces above ``median + k*MAD``
  of the node's recent accepted forces;
* stability restriction: once a node's median error is below ``e_stable``,
  single-window shifts above ``f_c`` are refused;
* centroid and gravity control: a weak pull toward the origin, and a
  blacklist when a sampled centroid drifts past ``t_drift``.
"""
from dataclasses import dataclass, field

import numpy as np

F_MAX_MS = 100.0
MAD_K = 8.0
WINDOW = 32
MIN_HISTORY = 8
MAD_FLOOR_MS = 0.5
E_STABLE = 0.30
F_C_MS = 75.0
RHO = 500.0
T_DRIFT_MS = 50.0


def clip_force(force, f_max=F_MAX_MS):
    """Scale a force vector (or magnitude) down to at most ``f_max``."""
    f = np.asarray(force, dtype=float)
    mag = float(np.linalg.norm(f)) if f.ndim else abs(float(f))
    if mag <= f_max:
        return f
    return f * (f_max / mag)


@dataclass
class ForceHistory:
    """Recent accepted force magnitudes per node plus flag counts and a blacklist.

    The window is pooled over all of a node's neighbours, so one neighbour
    cannot shift its own baseline by repetition.
    """
    n: int
    window: int = WINDOW
    mags: np.ndarray = None
    counts: np.ndarray = None
    heads: np.ndarray = None
    flags: dict = field(default_factory=dict)
    blacklist: set = field(default_factory=set)

    def __post_init__(self):
        if self.mags is None:
            self.mags = np.full((self.n, self.window), np.nan)
            self.counts = np.zeros(self.n, dtype=np.int64)
            self.heads = np.zeros(self.n, dtype=np.int64)

    def append(self, node, mag):
        self.mags[node, self.heads[node]] = mag
        self.heads[node] = (self.heads[node] + 1) % self.window
        self.counts[node] = min(self.counts[node] + 1, self.window)

    def append_many(self, nodes, mags):
        for v, m in zip(np.asarray(nodes).tolist(), np.asarray(mags).tolist()):
            self.append(v, m)

    def values(self, node):
        return self.mags[node][~np.isnan(self.mags[node])]

    def flag(self, node, neighbor):
        key = (int(node), int(neighbor))
        self.flags[key] = self.flags.get(key, 0) + 1

    def thresholds(self, k=MAD_K, min_history=MIN_HISTORY, mad_floor=MAD_FLOOR_MS):
        """Per-node rejection threshold ``median + k * MAD`` (inf if history is short)."""
        thr = np.full(self.n, np.inf)
        rows = np.flatnonzero(self.counts >= max(min_history, 1))
        if len(rows):
            m = self.mags[rows]
            med = np.nanmedian(m, axis=1)
            mad = np.nanmedian(np.abs(m - med[:, None]), axis=1)
            thr[rows] = med + k * np.maximum(mad, mad_floor)
        return thr

    def copy(self):
        return ForceHistory(self.n, self.window, self.mags.copy(), self.counts.copy(),
                            self.heads.copy(), dict(self.flags), set(self.blacklist))


@dataclass
class FilterResult:
    accepted: bool
    force: np.ndarray


def filter_force(history, node, neighbor, force, f_max=F_MAX_MS, k=MAD_K,
                 min_history=MIN_HISTORY, mad_floor=MAD_FLOOR_MS):
    """Clip, then accept or reject one force on ``node`` exerted by ``neighbor``.

    Accepted magnitudes join the node's window; a rejection flags the
    neighbour.  Forces from blacklisted neighbours are always rejected.
    """
    f = np.asarray(force, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("force must be finite")
    f = clip_force(f, f_max)
    mag = float(np.linalg.norm(f)) if f.ndim else abs(float(f))
    if neighbor in history.blacklist:
        return FilterResult(False, f)
    vals = history.values(node)
    if len(vals) >= min_history:
        med = float(np.median(vals))
        mad = max(float(np.median(np.abs(vals - med))), mad_floor)
        if mag > med + k * mad:
            history.flag(node, neighbor)
            return FilterResult(False, f)
    history.append(node, mag)
    return FilterResult(True, f)


def filter_forces(history, nodes, neighbors, mags, f_max=F_MAX_MS, k=MAD_K,
                  min_history=MIN_HISTORY, mad_floor=MAD_FLOOR_MS, commit=True):
    """Vectorised :func:`filter_force` on magnitudes against start-of-window thresholds.

    Returns ``(accept_mask, clipped_mags)``.  With ``commit`` the accepted
    magnitudes are appended and rejected neighbours flagged.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    clipped = np.minimum(np.abs(np.asarray(mags, dtype=float)), f_max)
    thr = history.thresholds(k, min_history, mad_floor)
    ok = clipped <= thr[nodes]
    if history.blacklist:
        ok &= ~np.isin(neighbors, list(history.blacklist))
    if commit:
        history.append_many(nodes[ok], clipped[ok])
        for v, u in zip(nodes[~ok].tolist(), neighbors[~ok].tolist()):
            history.flag(v, u)
    return ok, clipped


def apply_stability_cap(err_estimate, shift, e_stable=E_STABLE, f_c=F_C_MS):
    """Return ``(shift', refused)``; stable nodes refuse shifts longer than ``f_c``."""
    shift = np.asarray(shift, dtype=float)
    if err_estimate < e_stable and float(np.linalg.norm(shift)) > f_c:
        return np.zeros_like(shift), True
    return shift, False


def apply_stability_caps(err, shifts, e_stable=E_STABLE, f_c=F_C_MS):
    """Row-wise :func:`apply_stability_cap`; returns ``(shifts', refused_mask)``."""
    refused = (np.asarray(err) < e_stable) & (np.linalg.norm(shifts, axis=1) > f_c)
    out = np.array(shifts, dtype=float, copy=True)
    out[refused] = 0.0
    return out, refused


def gravity_term(x, rho=RHO):
    """``G = (||x|| / rho)^2``."""
    return (float(np.linalg.norm(x)) / rho) ** 2


def apply_gravity(X, rho=RHO):
    """Move every point ``G`` ms straight toward the origin (never past it)."""
    X = np.asarray(X, dtype=float)
    norm = np.linalg.norm(X, axis=1, keepdims=True)
    G = (norm / rho) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        step = np.where(norm > 0, np.minimum(G, norm) / norm, 0.0)
    return X - step * X


@dataclass
class CentroidCheck:
    ok: bool
    centroid: np.ndarray
    blacklist: int = None


def centroid_drift_check(coords, t_drift=T_DRIFT_MS, sources=None, forces=None):
    """Compare the sample centroid with ``t_drift`` (strictly greater drifts).

    On drift the blacklisted node is the source whose force has the largest
    component along the drift direction.  ``sources``/``forces`` name who
    pushes how hard; without them each sampled point stands in for itself
    (``sources`` indexes ``coords`` rows).
    """
    coords = np.asarray(coords, dtype=float)
    if len(coords) == 0:
        raise ValueError("centroid sample is empty")
    c = coords.mean(axis=0)
    norm = float(np.linalg.norm(c))
    if norm <= t_drift:
        return CentroidCheck(True, c)
    u = c / norm
    if forces is None:
        forces = coords
        sources = np.arange(len(coords)) if sources is None else sources
    proj = np.asarray(forces, dtype=float) @ u
    return CentroidCheck(False, c, int(np.asarray(sources)[int(np.argmax(proj))]))
