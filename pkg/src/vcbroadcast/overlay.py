"""Peer overlay graph and the per-packet latency model.

One-way delay on an established connection is

    prop(u, v) + queue(u, v, t) + noise

where ``prop`` is fixed and symmetric, ``queue`` is a scripted piecewise
constant congestion term and ``noise`` is Gaussian jitter.  Samples are
clamped to ``floor_ms`` so every delivery takes strictly positive time.
"""
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from ._rng import derive_rng

LEGS_FULL = 3  # digest, bitmap, payload
LEGS_DIRECT = 1  # body pushed straight away
INTER_GAP_MS = 1.0


class OverlayError(ValueError):
    pass


@dataclass
class Overlay:
    """Undirected peer graph with node ids ``0..n-1``."""

    n: int
    edges: np.ndarray  # (E, 2) int, u < v, lexicographically sorted
    degree_cap: int = 64
    peers: list = field(init=False, repr=False)
    peer_edges: list = field(init=False, repr=False)
    _edge_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges):
            lo = self.edges.min(axis=1)
            hi = self.edges.max(axis=1)
            self.edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise OverlayError("self-loop in edge list")
        self._edge_index = {(int(u), int(v)): i for i, (u, v) in enumerate(self.edges)}
        nbrs = [[] for _ in range(self.n)]
        for i, (u, v) in enumerate(self.edges):
            nbrs[u].append((int(v), i))
            nbrs[v].append((int(u), i))
        self.peers = []
        self.peer_edges = []
        for lst in nbrs:
            lst.sort()
            self.peers.append(np.array([p for p, _ in lst], dtype=np.int64))
            self.peer_edges.append(np.array([e for _, e in lst], dtype=np.int64))

    @property
    def n_edges(self):
        return len(self.edges)

    def degree(self, v):
        return len(self.peers[v])

    def has_edge(self, u, v):
        return (min(u, v), max(u, v)) in self._edge_index

    def edge_id(self, u, v):
        try:
            return self._edge_index[(min(u, v), max(u, v))]
        except KeyError:
            raise OverlayError(f"({u}, {v}) is not an overlay edge") from None

    def to_networkx(self):
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(map(tuple, self.edges.tolist()))
        return g

    def is_connected(self):
        return self.n <= 1 or nx.is_connected(self.to_networkx())


def build_overlay(n, degree_cap=64, seed=0):
    """Seeded random overlay where every node opens up to ``degree_cap // 2``
    outbound connections and accepts inbound ones until ``degree_cap``.

    Disconnected pieces are stitched together afterwards without breaking
    the degree cap.
    """
    if n < 2:
        raise OverlayError(f"n must be >= 2, got {n}")
    if degree_cap < 2:
        raise OverlayError(f"degree_cap must be >= 2, got {degree_cap}")
    rng = derive_rng(seed, "overlay", "edges")
    outbound = min(max(1, degree_cap // 2), n - 1)
    adj = [set() for _ in range(n)]

    for _ in range(outbound):
        order = rng.permutation(n).tolist()
        # a handful of tries per node keeps the loop bounded on saturated graphs
        cands = rng.integers(0, n, size=(n, 8)).tolist()
        for u, tries in zip(order, cands):
            if len(adj[u]) >= degree_cap:
                continue
            for v in tries:
                if v != u and v not in adj[u] and len(adj[v]) < degree_cap:
                    adj[u].add(v)
                    adj[v].add(u)
                    break

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((u, v) for u in range(n) for v in adj[u] if u < v)
    _stitch_components(g, degree_cap, rng)
    return Overlay(n=n, edges=np.array(sorted(g.edges()), dtype=np.int64).reshape(-1, 2),
                   degree_cap=degree_cap)


def _free_endpoint(g, comp, cap, rng):
    """A node of ``comp`` with spare capacity, freeing one if necessary."""
    members = sorted(comp)
    spare = [v for v in members if g.degree(v) < cap]
    if spare:
        return spare[int(rng.integers(len(spare)))], None
    # saturated component: every degree >= 2 so a cycle edge exists
    sub = g.subgraph(members)
    bridges = {tuple(sorted(e)) for e in nx.bridges(sub)}
    for u, v in sorted(tuple(sorted(e)) for e in sub.edges()):
        if (u, v) not in bridges:
            g.remove_edge(u, v)
            return u, v
    raise OverlayError("cannot connect overlay under the degree cap")


def _stitch_components(g, cap, rng):
    while True:
        comps = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
        if len(comps) == 1:
            return
        a, a_other = _free_endpoint(g, comps[0], cap, rng)
        b, b_other = _free_endpoint(g, comps[1], cap, rng)
        g.add_edge(a, b)
        # removed cycle edges keep each side connected; reuse the freed slots
        if a_other is not None and b_other is not None:
            g.add_edge(a_other, b_other)


@dataclass
class CongestionEpisode:
    u: int
    v: int
    start_ms: float
    duration_ms: float
    added_ms: float

    def active(self, t_ms):
        return self.start_ms <= t_ms < self.start_ms + self.duration_ms


@dataclass
class LatencyField:
    """Per-edge propagation delays plus jitter and scripted queueing."""

    overlay: Overlay
    prop: np.ndarray  # (E,) ms, aligned with overlay.edges
    labels: np.ndarray  # ground-truth continent per node
    jitter_mu: float = 0.0
    jitter_sigma: float = 0.0
    floor_ms: float = 1.0
    positions: np.ndarray = None
    episodes: list = field(default_factory=list)
    seed: int = 0
    _by_edge: dict = field(init=False, repr=False)
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.prop = np.asarray(self.prop, dtype=float)
        if self.prop.shape != (self.overlay.n_edges,):
            raise ValueError("prop must have one entry per overlay edge")
        if np.any(self.prop <= 0):
            raise ValueError("propagation delays must be positive")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self._rng = derive_rng(self.seed, "latency", "jitter")
        self._by_edge = {}
        for ep in self.episodes:
            self.add_episode(ep)

    @property
    def deterministic(self):
        return self.jitter_sigma == 0 and not self.episodes

    def add_episode(self, ep):
        if isinstance(ep, dict):
            ep = CongestionEpisode(**ep)
        e = self.overlay.edge_id(ep.u, ep.v)
        self._by_edge.setdefault(e, []).append(ep)
        if ep not in self.episodes:
            self.episodes.append(ep)

    def prop_of(self, u, v):
        return float(self.prop[self.overlay.edge_id(u, v)])

    def queue(self, u, v, t_ms):
        return self.queue_edge(self.overlay.edge_id(u, v), t_ms)

    def queue_edge(self, e, t_ms):
        eps = self._by_edge.get(e)
        if not eps:
            return 0.0
        return float(sum(ep.added_ms for ep in eps if ep.active(t_ms)))

    def queue_all(self, t_ms):
        q = np.zeros(self.overlay.n_edges)
        for e, eps in self._by_edge.items():
            q[e] = sum(ep.added_ms for ep in eps if ep.active(t_ms))
        return q

    def sample_edge(self, e, t_ms, rng=None, size=None):
        rng = self._rng if rng is None else rng
        base = self.prop[e] + self.queue_edge(e, t_ms)
        if self.jitter_sigma == 0:
            noise = np.full(size, self.jitter_mu) if size else self.jitter_mu
        else:
            noise = rng.normal(self.jitter_mu, self.jitter_sigma, size=size)
        return np.maximum(base + noise, self.floor_ms)

    def sample_edges(self, edge_ids, t_ms, rng=None):
        """One draw per listed edge (vectorised telemetry path)."""
        rng = self._rng if rng is None else rng
        edge_ids = np.asarray(edge_ids)
        base = self.prop[edge_ids]
        if self._by_edge:
            base = base + self.queue_all(t_ms)[edge_ids]
        if self.jitter_sigma == 0:
            noise = self.jitter_mu
        else:
            noise = rng.normal(self.jitter_mu, self.jitter_sigma, size=len(edge_ids))
        return np.maximum(base + noise, self.floor_ms)


def generate_geo_latency(overlay, k_continents=3, intra_range=(10.0, 60.0),
                         inter_multiplier=(2.0, 5.0), jitter=(0.0, 0.0), seed=0,
                         pair_noise=0.05, floor_ms=1.0, episodes=()):
    """Continental latency field on a latent 2-D map.

    Each continent is a disc whose diameter equals ``intra_range[1]``; same
    continent delays are the map distance clipped into ``intra_range``.
    Continent centres are placed so that every centre-to-centre distance is
    ``inter_multiplier`` times the mean intra-continent delay, which makes
    the field close to Euclidean (and therefore embeddable) while keeping
    the continental ratio.  Cross-continent delays are floored
    ``INTER_GAP_MS`` above ``intra_range[1]``.  ``pair_noise`` adds a
    symmetric per-edge multiplicative wobble.
    """
    lo, hi = map(float, intra_range)
    m_lo, m_hi = map(float, inter_multiplier)
    if k_continents < 1:
        raise ValueError("k_continents must be >= 1")
    if lo <= 0 or hi < lo:
        raise ValueError(f"bad intra_range {intra_range}")
    if m_lo < 1 or m_hi < m_lo:
        raise ValueError(f"inter_multiplier must satisfy 1 <= lo <= hi, got {inter_multiplier}")
    rng = derive_rng(seed, "latency", "geo")
    n = overlay.n
    labels = np.empty(n, dtype=np.int64)
    labels[rng.permutation(n)] = np.arange(n) % k_continents

    radius = hi / 2.0
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = radius * np.sqrt(rng.uniform(0, 1, n))
    offsets = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)

    # mean clipped intra delay, estimated on the same disc model
    mc = derive_rng(seed, "latency", "geo-mc")
    a = mc.uniform(0, 1, (4096, 2))
    b = mc.uniform(0, 1, (4096, 2))
    pa = radius * np.sqrt(a[:, :1]) * np.c_[np.cos(2 * np.pi * a[:, 1]), np.sin(2 * np.pi * a[:, 1])]
    pb = radius * np.sqrt(b[:, :1]) * np.c_[np.cos(2 * np.pi * b[:, 1]), np.sin(2 * np.pi * b[:, 1])]
    mean_intra = float(np.clip(np.linalg.norm(pa - pb, axis=1), lo, hi).mean())

    centers = _place_centers(k_continents, mean_intra, m_lo, m_hi, rng)
    positions = centers[labels] + offsets

    u, v = overlay.edges[:, 0], overlay.edges[:, 1]
    dist = np.linalg.norm(positions[u] - positions[v], axis=1)
    wobble = 1.0 + rng.uniform(-pair_noise, pair_noise, len(dist))
    same = labels[u] == labels[v]
    # border nodes of neighbouring continents can sit close on the map; keep
    # every cross-continent delay above the intra-continent ceiling
    prop = np.where(same, np.clip(np.clip(dist, lo, hi) * wobble, lo, hi),
                    np.maximum(dist * wobble, hi + INTER_GAP_MS))
    prop = np.maximum(prop, floor_ms)
    mu, sigma = jitter
    return LatencyField(overlay=overlay, prop=prop, labels=labels, jitter_mu=float(mu),
                        jitter_sigma=float(sigma), floor_ms=floor_ms, positions=positions,
                        episodes=[CongestionEpisode(**e) if isinstance(e, dict) else e
                                  for e in episodes], seed=seed)


def _place_centers(k, mean_intra, m_lo, m_hi, rng):
    if k == 1:
        return np.zeros((1, 2))
    # keep a margin inside the multiplier band so the mean ratio lands inside it
    margin = 0.1 * (m_hi - m_lo)
    d_lo = (m_lo + margin) * mean_intra
    d_hi = (m_hi - margin) * mean_intra
    for _ in range(200):
        centers = [np.zeros(2)]
        ok = True
        while len(centers) < k and ok:
            for _ in range(2000):
                r = rng.uniform(d_lo, d_hi)
                th = rng.uniform(0, 2 * np.pi)
                anchor = centers[int(rng.integers(len(centers)))]
                c = anchor + r * np.array([np.cos(th), np.sin(th)])
                d = np.linalg.norm(np.asarray(centers) - c, axis=1)
                if np.all((d >= d_lo) & (d <= d_hi)):
                    centers.append(c)
                    break
            else:
                ok = False
        if ok:
            return np.asarray(centers)
    raise ValueError(f"cannot place {k} continents with multipliers ({m_lo}, {m_hi})")


def sample_latency(lat, u, v, t_ms, rng=None):
    """One one-way delay draw for the established connection ``u -> v``."""
    if u == v:
        raise OverlayError("u and v must differ")
    e = lat.overlay.edge_id(u, v)
    return float(lat.sample_edge(e, t_ms, rng))


def tx_transfer_time(lat, u, v, t_ms, body_direct=False, rng=None):
    """Digest + bitmap + payload (three independent draws), or a single draw
    when the body is pushed directly."""
    legs = LEGS_DIRECT if body_direct else LEGS_FULL
    if u == v:
        raise OverlayError("u and v must differ")
    e = lat.overlay.edge_id(u, v)
    return float(np.sum(lat.sample_edge(e, t_ms, rng, size=legs)))
