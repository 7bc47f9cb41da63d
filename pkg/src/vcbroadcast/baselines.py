"""Comparison relay policies: random-8, lowest-RTT-8, UCB peer scoring, Vivaldi."""
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from sklearn.base import BaseEstimator

from ._rng import derive_rng
from .adversary import _sign, forge_coordinate, forge_delay
from .cluster import default_k, kmeans_cluster
from .engine import SCHEME, Scheme, to_us

FANOUT = 8
PROBE_BYTES = 88  # probe + reply headers and the replier's coordinate and error


def random_relay_list(peers, fanout=FANOUT, seed=0, node=0):
    """Uniform sample of ``min(fanout, |peers|)`` distinct peers."""
    peers = np.asarray(peers)
    rng = derive_rng(seed, "random8", int(node))
    m = min(fanout, len(peers))
    return tuple(np.sort(rng.choice(peers, m, replace=False)).tolist())


def blockp2p_relay_list(v, overlay, prop, fanout=FANOUT):
    """The ``fanout`` peers with the smallest propagation delay (ties by id)."""
    peers = overlay.peers[v]
    d = np.asarray(prop)[overlay.peer_edges[v]]
    order = np.lexsort((peers, d))
    return tuple(int(p) for p in peers[order[:fanout]])


def bridge_components(lists, overlay, prop):
    """Add the cheapest outgoing overlay edge per strongly connected component.

    Lowest-delay lists stay inside a continent, so on their own they never
    leave it.  Each round gives every component one extra out-edge (its
    cheapest link to another component) until the relay digraph is strongly
    connected.  Returns new lists; original entries are kept in order.
    """
    lists = [list(x) for x in lists]
    n = overlay.n
    eu, ev = overlay.edges[:, 0], overlay.edges[:, 1]
    prop = np.asarray(prop)
    while True:
        g = nx.DiGraph()
        g.add_nodes_from(range(n))
        g.add_edges_from((v, p) for v in range(n) for p in lists[v])
        comps = list(nx.strongly_connected_components(g))
        if len(comps) == 1:
            return [tuple(x) for x in lists]
        comp_of = np.empty(n, dtype=np.int64)
        for i, c in enumerate(comps):
            comp_of[list(c)] = i
        cross = comp_of[eu] != comp_of[ev]
        for i in range(len(comps)):
            # directed candidates u -> w leaving component i
            a = cross & (comp_of[eu] == i)
            b = cross & (comp_of[ev] == i)
            cand = [(prop[e], int(eu[e]), int(ev[e])) for e in np.flatnonzero(a)]
            cand += [(prop[e], int(ev[e]), int(eu[e])) for e in np.flatnonzero(b)]
            if cand:
                _, u, w = min(cand)
                if w not in lists[u]:
                    lists[u].append(w)


class Random8(Scheme):
    """Eight uniformly random peers per node.

    A node nobody picked would never hear anything, so the lists get bridge
    edges too; bridges are chosen by random weights, keeping the scheme
    blind to latency.
    """
    name = "random8"

    def __init__(self, fanout=FANOUT):
        self.fanout = fanout

    def setup(self, sim):
        lists = [random_relay_list(node.peers, self.fanout, sim.seed, v)
                 for v, node in enumerate(sim.nodes)]
        w = derive_rng(sim.seed, "random8", "bridge").random(sim.overlay.n_edges)
        lists = bridge_components(lists, sim.overlay, w)
        for v, node in enumerate(sim.nodes):
            node.static_list = lists[v]


class BlockP2P8(Scheme):
    """Lowest-delay peers measured once at start-up, plus component bridges."""
    name = "blockp2p8"

    def __init__(self, fanout=FANOUT):
        self.fanout = fanout

    def startup_prop(self, sim):
        """Delays seen at start-up; compromised nodes report forged ones."""
        prop = sim.field.prop
        mode = sim.adv.forgery_mode
        if mode is None or not sim.adv.active(0.0):
            return prop
        I, J = sim.overlay.edges[:, 0], sim.overlay.edges[:, 1]
        hit = sim.compromised[I] | sim.compromised[J]
        out = prop.copy()
        out[hit] = forge_delay(sim.adv, prop[hit], 0)
        return out

    def setup(self, sim):
        prop = self.startup_prop(sim)
        lists = [blockp2p_relay_list(v, sim.overlay, prop, self.fanout)
                 for v in range(sim.n)]
        lists = bridge_components(lists, sim.overlay, prop)
        for v, node in enumerate(sim.nodes):
            node.static_list = lists[v]


@dataclass
class PerigeeScore:
    """UCB1 statistics of one node over its peers."""
    peers: np.ndarray
    total: np.ndarray
    pulls: np.ndarray
    rounds: int = 0

    @classmethod
    def fresh(cls, peers):
        return cls(np.asarray(peers), np.zeros(len(peers)), np.zeros(len(peers)), 0)

    def mean(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.pulls > 0, self.total / np.maximum(self.pulls, 1), 0.0)

    def ucb(self, c):
        n_total = max(self.rounds, 1)
        bonus = c * np.sqrt(math.log(n_total) / np.maximum(self.pulls, 1e-12))
        return np.where(self.pulls > 0, self.mean() + bonus, np.inf)


def perigee_update(score, selected, arrivals, fanout=FANOUT, c=1.0, warmup=64, epoch=16):
    """Fold in one round and return ``(score, relay_list)``.

    ``arrivals[i]`` is the time the tx would reach the node through peer
    ``score.peers[i]``; only currently selected peers are observed.  The
    usefulness of an observation is ``1 - rank/(m-1)`` among the observed
    arrivals (1 for the fastest).  During warm-up the list rotates
    round-robin over all peers; afterwards, at every epoch boundary the
    worst selected peer is replaced by the best-UCB unselected one.
    """
    peers = score.peers
    m = len(peers)
    k = min(fanout, m)
    sel = np.zeros(m, dtype=bool)
    if len(selected):
        sel[np.searchsorted(peers, np.asarray(selected))] = True  # peers are sorted
    obs = np.flatnonzero(sel & np.isfinite(arrivals))
    if len(obs):
        order = np.argsort(np.argsort(np.asarray(arrivals)[obs], kind="stable"), kind="stable")
        use = 1.0 - order / max(len(obs) - 1, 1)
        score.total[obs] += use
        score.pulls[obs] += 1
    score.rounds += 1
    r = score.rounds
    if r < warmup:
        start = (r * k) % m
        idx = [(start + i) % m for i in range(k)]
        return score, tuple(int(peers[i]) for i in sorted(idx))
    if r == warmup:
        best = np.argsort(-score.ucb(c), kind="stable")[:k]
        return score, tuple(sorted(int(peers[i]) for i in best))
    cur = [i for i in range(m) if sel[i]]
    if (r - warmup) % epoch == 0 and len(cur) < m:
        mean = score.mean()
        worst = min(cur, key=lambda i: (mean[i], -i))
        cur.remove(worst)
        ucb = score.ucb(c)
        rest = [i for i in range(m) if i not in cur and i != worst]
        if rest:
            cur.append(max(rest, key=lambda i: (ucb[i], -i)))
        else:
            cur.append(worst)
    return score, tuple(sorted(int(peers[i]) for i in cur))


def relay_arrivals(lists, origin, overlay, prop, hop_extra_ms, legs=3):
    """Earliest arrival per node when every node relays over its list once.

    Edge cost is ``legs * prop + hop_extra_ms``; ``hop_extra_ms`` is the
    batch wait, a scalar or one value per relaying node.
    """
    hop_extra_ms = np.broadcast_to(np.asarray(hop_extra_ms, dtype=float), (overlay.n,))
    n = overlay.n
    rows, cols, w = [], [], []
    for v in range(n):
        lst = np.asarray(lists[v], dtype=np.int64)
        if len(lst) == 0:
            continue
        e = overlay.peer_edges[v][np.searchsorted(overlay.peers[v], lst)]
        rows.append(np.full(len(lst), v))
        cols.append(lst)
        w.append(legs * prop[e] + hop_extra_ms[v])
    g = csr_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n, n))
    return dijkstra(g, directed=True, indices=origin)


def subscriptions_to_relay(subs, n):
    """Invert subscription lists: ``v`` subscribing to ``p`` means ``p`` relays to ``v``."""
    out = [[] for _ in range(n)]
    for v, lst in enumerate(subs):
        for p in lst:
            out[p].append(v)
    return [tuple(sorted(x)) for x in out]


class PerigeeBatch:
    """All nodes' UCB1 statistics as padded ``(n, max_degree)`` arrays.

    Row ``v`` follows exactly the rules of :func:`perigee_update` for node
    ``v``; this is the same update applied to every node at once.
    """

    def __init__(self, overlay, fanout=FANOUT, c=1.0, warmup=64, epoch=16):
        n = overlay.n
        deg = np.array([len(p) for p in overlay.peers])
        D = int(deg.max()) if n else 0
        self.n, self.D = n, D
        self.peers = np.full((n, D), -1, dtype=np.int64)
        self.edges = np.zeros((n, D), dtype=np.int64)
        for v in range(n):
            self.peers[v, :deg[v]] = overlay.peers[v]
            self.edges[v, :deg[v]] = overlay.peer_edges[v]
        self.m = deg
        self.valid = self.peers >= 0
        self.k = np.minimum(fanout, deg)
        self.c, self.warmup, self.epoch = c, warmup, epoch
        self.total = np.zeros((n, D))
        self.pulls = np.zeros((n, D))
        self.rounds = 0
        self.sel = self._rotation(1)

    def _rotation(self, r):
        j = np.arange(self.D)[None, :]
        m = np.maximum(self.m, 1)[:, None]
        start = (r * self.k)[:, None] % m
        return self.valid & (((j - start) % m) < self.k[:, None])

    def mean(self):
        return np.where(self.pulls > 0, self.total / np.maximum(self.pulls, 1), 0.0)

    def ucb(self):
        bonus = self.c * np.sqrt(math.log(max(self.rounds, 1)) / np.maximum(self.pulls, 1e-12))
        u = np.where(self.pulls > 0, self.mean() + bonus, np.inf)
        return np.where(self.valid, u, -np.inf)

    def update(self, arrivals):
        """Fold in one round; ``arrivals`` is ``(n, D)`` (ignored where invalid)."""
        n, D = self.n, self.D
        rows = np.arange(n)
        obs = self.sel & np.isfinite(arrivals)
        key = np.where(obs, arrivals, np.inf)
        order = np.argsort(key, axis=1, kind="stable")
        rank = np.empty_like(order)
        rank[rows[:, None], order] = np.arange(D)[None, :]
        cnt = obs.sum(axis=1, keepdims=True)
        use = 1.0 - rank / np.maximum(cnt - 1, 1)
        self.total += np.where(obs, use, 0.0)
        self.pulls += obs
        self.rounds += 1
        r = self.rounds
        if r < self.warmup:
            self.sel = self._rotation(r)
        elif r == self.warmup:
            best = np.argsort(-self.ucb(), axis=1, kind="stable")
            sel = np.zeros((n, D), dtype=bool)
            take = np.arange(D)[None, :] < self.k[:, None]
            sel[rows[:, None], best] = take
            self.sel = sel & self.valid
        elif (r - self.warmup) % self.epoch == 0:
            live = self.k < self.m
            mean = np.where(self.sel, self.mean(), np.inf)
            # lowest mean, ties to the larger index
            worst = D - 1 - np.argmin(mean[:, ::-1], axis=1)
            rest = self.valid & ~self.sel
            rest[rows, worst] = False
            u = np.where(rest, self.ucb(), -np.inf)
            best = np.argmax(u, axis=1)  # ties to the smaller index
            swap = live & rest.any(axis=1)
            self.sel[rows[swap], worst[swap]] = False
            self.sel[rows[swap], best[swap]] = True
        return self

    def subscriptions(self):
        return [tuple(int(p) for p in self.peers[v][self.sel[v]]) for v in range(self.n)]

    def relay_edges(self):
        """``(src, dst, edge)`` arrays: each upstream peer relays to its subscriber."""
        v, j = np.nonzero(self.sel)
        return self.peers[v, j], v, self.edges[v, j]


class Perigee8(Scheme):
    """UCB1 peer scoring trained on broadcast rounds before the workload.

    Each node keeps eight upstream peers, chosen for how early they deliver;
    an upstream peer relays to every node that picked it.  So every node has
    in-degree eight and out-degree eight on average; nodes nobody picked get
    bridge edges so that every origin reaches everyone.
    """
    name = "perigee8"

    def __init__(self, fanout=FANOUT, c=1.0, warmup=64, epoch=16, train_rounds=128):
        self.fanout, self.c, self.warmup, self.epoch = fanout, c, warmup, epoch
        self.train_rounds = train_rounds

    def train(self, overlay, prop, seed, delta_ms=400.0, keep_history=False):
        """Returns ``(relay_lists, history)``; ``history`` holds per-round selections."""
        n = overlay.n
        prop = np.asarray(prop, dtype=float)
        rng = derive_rng(seed, "perigee", "origins")
        b = PerigeeBatch(overlay, self.fanout, self.c, self.warmup, self.epoch)
        b.rounds = 0
        leg3 = np.where(b.valid, 3 * prop[b.edges], np.inf)
        pad = np.where(b.valid, b.peers, 0)
        history = []
        for _ in range(self.train_rounds):
            origin = int(rng.integers(n))
            wait = rng.uniform(0, delta_ms, n)  # where each relay falls in its batch cycle
            src, dst, e = b.relay_edges()
            g = csr_matrix((3 * prop[e] + wait[src], (src, dst)), shape=(n, n))
            t = dijkstra(g, directed=True, indices=origin)
            b.update(t[pad] + leg3)
            if keep_history:
                history.append(b.sel.copy())
        self.batch = b
        self.subscriptions = b.subscriptions()
        lists = bridge_components(subscriptions_to_relay(self.subscriptions, n), overlay, prop)
        return lists, history

    def setup(self, sim):
        lists, _ = self.train(sim.overlay, sim.field.prop, sim.seed, sim.cfg.delta_ms)
        for v, node in enumerate(sim.nodes):
            node.static_list = lists[v]


# decentralised Vivaldi

@dataclass
class VivaldiParams:
    cc: float = 0.25
    ce: float = 0.25
    init_err: float = 1.0
    min_err: float = 1e-3


def mercury_vivaldi_step(local_coord, peer_coord, measured, params=None, local_err=1.0,
                         peer_err=1.0, rng=None):
    """One spring update of ``local_coord`` from a probe; returns ``(coord, err)``."""
    params = params or VivaldiParams()
    x = np.asarray(local_coord, dtype=float)
    y = np.asarray(peer_coord, dtype=float)
    diff = x - y
    dist = float(np.linalg.norm(diff))
    if dist > 0:
        u = diff / dist
    else:
        rng = rng or np.random.default_rng(0)
        u = rng.normal(size=len(x))
        u /= np.linalg.norm(u)
    w = local_err / (local_err + peer_err) if local_err + peer_err > 0 else 0.5
    e_s = abs(dist - measured) / measured if measured > 0 else 0.0
    err = e_s * params.ce * w + local_err * (1 - params.ce * w)
    err = max(err, params.min_err)
    delta = params.cc * w
    return x + delta * (measured - dist) * u, err


def probe_forgery(adversary, window=0):
    """Lie told to a Vivaldi prober: ``inflate`` (delay) or ``deflate`` (coordinate)."""
    mode = adversary.forgery_mode
    if mode == "oscillate":
        return "inflate" if _sign(adversary, window) > 0 else "deflate"
    return mode


def vivaldi_round(X, err, overlay, field_, t_ms, rng, params=None, compromised=None,
                  adversary=None, window=0):
    """Every node probes one random peer; updates use start-of-round state."""
    params = params or VivaldiParams()
    n = overlay.n
    deg = np.array([len(p) for p in overlay.peers])
    pick = (rng.random(n) * deg).astype(np.int64)
    J = np.array([overlay.peers[v][pick[v]] for v in range(n)], dtype=np.int64)
    E = np.array([overlay.peer_edges[v][pick[v]] for v in range(n)], dtype=np.int64)
    rtt = field_.sample_edges(E, t_ms, rng)
    Y = X[J].copy()
    pe = err[J].copy()
    if compromised is not None and adversary is not None and adversary.active(t_ms) \
            and adversary.forgery_mode is not None:
        # the prober times the reply itself: a liar can delay it but never speed it
        # up, so deflation is a coordinate claim; liars also claim full confidence
        mode = probe_forgery(adversary, window)
        bad = np.flatnonzero(compromised[J])
        if mode == "inflate":
            rtt[bad] += adversary.magnitude_ms
        else:
            for i in bad:
                Y[i] = forge_coordinate(adversary, X[J[i]], target=X[i], window=window)
        pe[bad] = params.min_err
    diff = X - Y
    dist = np.linalg.norm(diff, axis=1)
    zero = dist == 0
    if zero.any():
        r = rng.normal(size=(int(zero.sum()), X.shape[1]))
        diff[zero] = r / np.linalg.norm(r, axis=1, keepdims=True)
        dist[zero] = 1.0
        u = diff / dist[:, None]
        dist[zero] = 0.0
    else:
        u = diff / dist[:, None]
    le = err
    w = le / np.maximum(le + pe, 1e-12)
    e_s = np.abs(dist - rtt) / rtt
    new_err = np.maximum(e_s * params.ce * w + le * (1 - params.ce * w), params.min_err)
    X_new = X + (params.cc * w * (rtt - dist))[:, None] * u
    honest = np.ones(n, dtype=bool) if compromised is None else ~compromised
    X_new[~honest] = X[~honest]  # attackers keep their true position
    new_err[~honest] = err[~honest]
    return X_new, new_err


def vivaldi_median_error(X, overlay, truth):
    """Median relative error of coordinate distances over overlay edges."""
    I, J = overlay.edges[:, 0], overlay.edges[:, 1]
    d = np.linalg.norm(X[I] - X[J], axis=1)
    return float(np.median(np.abs(d - truth) / truth))


class VivaldiEmbedding(BaseEstimator):
    """Decentralised Vivaldi run for a number of probe rounds (estimator form)."""

    def __init__(self, rounds=64, cc=0.25, ce=0.25, random_state=0):
        self.rounds = rounds
        self.cc = cc
        self.ce = ce
        self.random_state = random_state

    def fit(self, overlay, field_):
        rng = derive_rng(self.random_state, "vivaldi", "probe")
        params = VivaldiParams(self.cc, self.ce)
        X = derive_rng(self.random_state, "vivaldi", "init").normal(0, 1, (overlay.n, 3))
        err = np.full(overlay.n, params.init_err)
        truth = field_.prop + field_.jitter_mu
        self.error_curve_ = []
        for r in range(self.rounds):
            X, err = vivaldi_round(X, err, overlay, field_, 0.0, rng, params)
            self.error_curve_.append(vivaldi_median_error(X, overlay, truth))
        self.coords_, self.errors_ = X, err
        return self

    def transform(self, X=None):
        return self.coords_


def mercury_relay_lists(X, err, overlay, seed, d_near=5, d_far=3, compromised=None,
                        adversary=None, cold_err=0.5, window=0, t_ms=0.0,
                        overlay_prop=None, cold=None):
    """Latency-aware 8-peer lists over each node's view of Vivaldi coordinates.

    K-means runs on the coordinate snapshot; a node ranks its in-cluster
    peers by claimed distance (compromised peers claim a forged position
    relative to it).  Nodes that have not converged use a random 8: those
    flagged in ``cold``, or without it those whose error is above
    ``cold_err``.  With ``overlay_prop`` the lists are bridged until every
    node is reachable.
    """
    n = overlay.n
    a = kmeans_cluster(X, default_k(n), seed)
    C = a.centroids
    forging = (compromised is not None and adversary is not None
               and adversary.forgery_mode is not None and adversary.active(t_ms))
    cold = np.asarray(err) > cold_err if cold is None else np.asarray(cold)
    lists = []
    for v in range(n):
        peers = overlay.peers[v]
        if cold[v]:
            lists.append(random_relay_list(peers, d_near + d_far, seed, v))
            continue
        Y = X[peers]
        if forging:
            bad = np.flatnonzero(compromised[peers])
            if len(bad):
                Y = Y.copy()
                for i in bad:
                    Y[i] = forge_coordinate(adversary, X[peers[i]], target=X[v],
                                            window=window)
        lab = np.argmin(((Y[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
        dist = np.linalg.norm(Y - X[v], axis=1)
        order = np.lexsort((peers, dist))
        same = lab[order] == a.labels[v]
        in_pool = [int(p) for p in peers[order][same]]
        out_pool = [int(p) for p in peers[order][~same]]
        near = in_pool[:d_near]
        rng = derive_rng(seed, "mercury", "far", v, window)
        far = [out_pool[i] for i in rng.permutation(len(out_pool))][:d_far]
        rest = [p for p in in_pool[d_near:] + out_pool if p not in far]
        lst = near + far
        lst += rest[:d_near + d_far - len(lst)]
        lists.append(tuple(lst))
    return bridge_components(lists, overlay, overlay_prop) if overlay_prop is not None else lists


class Mercury(Scheme):
    """Decentralised Vivaldi clustering with a source outburst."""
    name = "mercury"
    outburst = True

    def __init__(self, outburst_cap=128, warmup_rounds=64, probe_interval_ms=1000.0,
                 refresh_ms=10_000.0, d_near=5, d_far=3, cc=0.25, ce=0.25, cold_err=0.5):
        self.outburst_cap = outburst_cap
        self.warmup_rounds = warmup_rounds
        self.probe_us = to_us(probe_interval_ms)
        self.refresh_us = to_us(refresh_ms)
        self.d_near, self.d_far = d_near, d_far
        self.params = VivaldiParams(cc, ce)
        self.cold_err = cold_err

    def setup(self, sim):
        n = sim.n
        self.rng = derive_rng(sim.seed, "vivaldi", "probe")
        self.X = derive_rng(sim.seed, "vivaldi", "init").normal(0, 1, (n, 3))
        self.err = np.full(n, self.params.init_err)
        self.warm = np.zeros(n, dtype=bool)  # converged at least once
        self.rounds = 0
        for _ in range(self.warmup_rounds):
            self._round(sim, 0.0)
        self._refresh(sim, 0)
        sim.schedule(self.probe_us, SCHEME, "probe")
        sim.schedule(self.refresh_us, SCHEME, "refresh")

    def _round(self, sim, t_ms):
        self.X, self.err = vivaldi_round(self.X, self.err, sim.overlay, sim.field, t_ms,
                                         self.rng, self.params, sim.compromised, sim.adv,
                                         self.rounds)
        self.rounds += 1
        sim.add_control_bytes(PROBE_BYTES * sim.n)

    def _refresh(self, sim, t_us):
        # once converged a node keeps trusting its coordinates, forged or not
        self.warm |= self.err <= self.cold_err
        lists = mercury_relay_lists(self.X, self.err, sim.overlay, sim.seed, self.d_near,
                                    self.d_far, sim.compromised, sim.adv, self.cold_err,
                                    window=t_us // self.refresh_us, t_ms=t_us / 1000.0,
                                    overlay_prop=sim.field.prop, cold=~self.warm)
        for v, node in enumerate(sim.nodes):
            sim.reannounce(v, *node.set_static_list(lists[v], t_us / 1000.0))

    def handle(self, sim, t_us, payload):
        if payload == "probe":
            self._round(sim, t_us / 1000.0)
            sim.schedule(t_us + self.probe_us, SCHEME, "probe")
        elif payload == "refresh":
            self._refresh(sim, t_us)
            sim.schedule(t_us + self.refresh_us, SCHEME, "refresh")
