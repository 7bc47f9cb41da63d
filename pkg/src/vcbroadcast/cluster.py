"""K-means over controller coordinates and per-node relay tables."""
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, ClusterMixin

from ._rng import derive_rng
from ._validation import check_coords, check_is_fitted

D_MAX = 10
TABLE_BUDGET_BYTES = 600
TAG_BYTES = 32
_HEADER = struct.Struct(">IHB")  # version, cluster id, entry count
_PRIO = struct.Struct(">HH")


def default_k(n):
    return max(1, math.ceil(math.sqrt(n)))


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: list = field(default_factory=list)  # per Lloyd iteration
    n_iter: int = 0


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = X[idx]
        d2 = np.minimum(d2, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans_cluster(X, k, seed=0, init=None, max_iter=100):
    """Lloyd's algorithm from a seeded k-means++ start (or ``init`` centroids).

    Stops when labels stop changing or after ``max_iter`` iterations.  An
    empty cluster is re-seeded at the point farthest from its current
    centroid (lowest index on ties).
    """
    X = check_coords(X, dim=np.shape(X)[1] if np.ndim(X) == 2 else 3)
    n = len(X)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if init is not None and len(init) == k:
        C = np.array(init, dtype=float, copy=True)
    else:
        C = kmeans_plusplus(X, k, derive_rng(seed, "kmeans", "init"))
    labels = np.full(n, -1)
    inertia = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        new = np.argmin(D, axis=1)
        inertia.append(float(D[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                C[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(((X - C[labels]) ** 2).sum(axis=1)))
            C[j] = X[far]
            labels[far] = j
    return ClusterAssignment(k=k, labels=labels.astype(np.int64), centroids=C,
                             inertia=inertia, n_iter=it)


class KMeansClustering(ClusterMixin, BaseEstimator):
    """Seeded Lloyd/k-means++ clustering; ``n_clusters=None`` means ceil(sqrt(n))."""

    def __init__(self, n_clusters=None, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None, init=None):
        X = check_coords(X, dim=np.shape(X)[1])
        k = self.n_clusters or default_k(len(X))
        a = kmeans_cluster(X, k, self.random_state, init=init, max_iter=self.max_iter)
        self.assignment_ = a
        self.labels_ = a.labels
        self.cluster_centers_ = a.centroids
        self.inertia_ = a.inertia[-1] if a.inertia else 0.0
        self.n_iter_ = a.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_coords(X, dim=self.cluster_centers_.shape[1])
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)


@dataclass
class RelayTable:
    owner: int
    cluster_id: int
    near: tuple
    far: tuple
    version: int = 0
    priorities: tuple = (0, 0)
    auth_tag: bytes = b"\x00" * TAG_BYTES

    @property
    def entries(self):
        return self.near + self.far

    def payload(self):
        """Encoded bytes that the authenticity tag covers (everything but the tag)."""
        ids = self.entries
        if len(ids) > D_MAX:
            raise ValueError(f"relay table holds {len(ids)} > {D_MAX} entries")
        return (_HEADER.pack(self.version, self.cluster_id, len(ids))
                + struct.pack(f">{len(ids)}I", *ids)
                + _PRIO.pack(*self.priorities))

    def same_content(self, other):
        return (other is not None and self.cluster_id == other.cluster_id
                and set(self.near) == set(other.near) and set(self.far) == set(other.far))


def encode_relay_table(table):
    """Fixed layout: version u32 | cluster u16 | count u8 | ids u32* | 2 x u16 | tag 32 B.

    The near/far split is not on the wire; decoding puts every entry in
    ``near`` unless ``n_near`` is passed to :func:`decode_relay_table`.
    """
    tag = bytes(table.auth_tag)
    if len(tag) != TAG_BYTES:
        raise ValueError("auth tag must be 32 bytes")
    out = table.payload() + tag
    assert len(out) <= TABLE_BUDGET_BYTES
    return out


def decode_relay_table(buf, owner=-1, n_near=None):
    version, cluster_id, count = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    ids = struct.unpack_from(f">{count}I", buf, off)
    off += 4 * count
    prio = _PRIO.unpack_from(buf, off)
    off += _PRIO.size
    tag = bytes(buf[off:off + TAG_BYTES])
    if len(tag) != TAG_BYTES or off + TAG_BYTES != len(buf):
        raise ValueError("truncated or oversized relay table")
    n_near = count if n_near is None else n_near
    return RelayTable(owner=owner, cluster_id=cluster_id, near=tuple(ids[:n_near]),
                      far=tuple(ids[n_near:]), version=version, priorities=prio,
                      auth_tag=tag)


def table_size(n_entries):
    return _HEADER.size + 4 * n_entries + _PRIO.size + TAG_BYTES


def build_relay_table(v, assignment, X, overlay, d_near=6, d_far=4, seed=0, version=0):
    """``d_near`` closest in-cluster peers plus ``d_far`` random out-of-cluster ones.

    Only overlay peers of ``v`` are candidates.  When one pool is too small
    the other fills the gap: missing near slots take the closest remaining
    out-of-cluster peers, missing far slots the closest remaining in-cluster
    ones.  Ties in distance go to the smaller node id.
    """
    if d_near < 0 or d_far < 0 or d_near + d_far > D_MAX:
        raise ValueError(f"need 0 <= d_near, d_far and d_near + d_far <= {D_MAX}")
    peers = overlay.peers[v]
    if len(peers) == 0:
        raise ValueError(f"node {v} has no peers")
    labels = assignment.labels
    dist = np.linalg.norm(X[peers] - X[v], axis=1)
    same = labels[peers] == labels[v]
    order = np.lexsort((peers, dist))  # by distance, then id
    in_pool = [int(peers[i]) for i in order if same[i]]
    out_pool = [int(peers[i]) for i in order if not same[i]]

    near = in_pool[:d_near]
    # permute the id-sorted pool so far picks do not churn with distances
    rng = derive_rng(seed, "relay", "far", int(v))
    by_id = sorted(out_pool)
    shuffled = [by_id[i] for i in rng.permutation(len(by_id))] if by_id else []
    far = shuffled[:d_far]
    short_near = d_near - len(near)
    if short_near > 0:
        taken = set(far)
        near += [p for p in out_pool if p not in taken][:short_near]
    short_far = d_far - len(far)
    if short_far > 0:
        taken = set(near)
        far += [p for p in in_pool if p not in taken][:short_far]
    return RelayTable(owner=int(v), cluster_id=int(labels[v]), near=tuple(near),
                      far=tuple(far), version=version)


def build_relay_tables(assignment, X, overlay, d_near=6, d_far=4, seed=0, version=0,
                       repair=True):
    tables = [build_relay_table(v, assignment, X, overlay, d_near, d_far, seed, version)
              for v in range(overlay.n)]
    if repair:
        repair_reachability(tables, X, overlay)
    return tables


def _relay_graph(tables, n):
    rows = np.repeat(np.arange(n), [len(t.entries) for t in tables])
    cols = np.fromiter((p for t in tables for p in t.entries), dtype=np.int64,
                       count=len(rows))
    return rows, cols


def _swap_entry(table, indeg, new, protect=()):
    """Replace the entry of ``table`` whose target loses least by it with ``new``.

    Far entries go first (last one first), then near ones from the back; a
    target is only dropped if someone else still relays to it.
    """
    for part in ("far", "near"):
        cur = list(getattr(table, part))
        for i in range(len(cur) - 1, -1, -1):
            if indeg[cur[i]] >= 2 and cur[i] not in protect:
                indeg[cur[i]] -= 1
                cur[i] = new
                indeg[new] += 1
                setattr(table, part, tuple(cur))
                return True
    return False


def repair_reachability(tables, X, overlay, max_rounds=None):
    """Edit tables in place until the relay digraph is strongly connected.

    Latency-driven lists can leave a node that no one relays to, or a group
    that only relays among itself.  For each such strongly connected
    component the closest outside peer gets an entry pointing in (if nothing
    enters) and one member gets an entry pointing out (if nothing leaves).
    Returns the number of repair rounds.
    """
    n = overlay.n
    edits = 0
    for _ in range(max_rounds or n):
        rows, cols = _relay_graph(tables, n)
        g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, comp = connected_components(g, directed=True, connection="strong")
        if n_comp == 1:
            return edits
        indeg = np.bincount(cols, minlength=n)
        cross = comp[rows] != comp[cols]
        has_in = np.zeros(n_comp, dtype=bool)
        has_out = np.zeros(n_comp, dtype=bool)
        has_in[comp[cols[cross]]] = True
        has_out[comp[rows[cross]]] = True
        progressed = False
        for c in range(n_comp):
            if has_in[c] and has_out[c]:
                continue
            members = np.flatnonzero(comp == c)
            if not has_in[c]:
                progressed |= _link(tables, X, overlay, indeg, comp, members, inward=True)
            if not has_out[c]:
                progressed |= _link(tables, X, overlay, indeg, comp, members, inward=False)
        edits += 1
        if not progressed:
            break
    return edits


def _link(tables, X, overlay, indeg, comp, members, inward):
    """Add one edge into (or out of) the component ``members``, closest pair first."""
    c = comp[members[0]]
    cand = []
    for v in members.tolist():
        peers = overlay.peers[v]
        out = peers[comp[peers] != c]
        if len(out):
            d = np.linalg.norm(X[out] - X[v], axis=1)
            cand += [(float(d[i]), v, int(out[i])) for i in range(len(out))]
    for _, v, u in sorted(cand):
        src, dst = (u, v) if inward else (v, u)
        if dst in tables[src].entries:
            continue
        if _swap_entry(tables[src], indeg, dst, protect=()):
            return True
    return False
