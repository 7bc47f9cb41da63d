"""Discrete-event core: event queue, sends, byte accounting and metrics.

Time is kept in integer microseconds; events are ordered by ``(time, seq)``
where ``seq`` is a global counter assigned when the event is scheduled.
"""
import heapq
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng
from .adversary import AdversaryConfig, blackhole_filter, compromised_mask
from .dissemination import DisseminationConfig, NodeState, TxRecord
from .overlay import LEGS_DIRECT, LEGS_FULL

log = logging.getLogger(__name__)

US = 1000  # microseconds per ms
DELIVER, BATCH, CONTROL, SCHEME, SUBMIT = range(5)
METRICS_VERSION = 1


def to_us(ms):
    return int(round(ms * US))


class Scheme:
    """Relay policy plugged into the simulator.

    ``outburst``: the origin sends to (almost) all peers at once.
    ``kickoff``: cross-cluster nonce-tagged receipts relay immediately.
    ``immediate``: every node relays on first receipt instead of batching.
    ``request_policy``: overrides the dissemination setting when not None.
    """
    name = "scheme"
    uses_controller = False
    outburst = False
    outburst_cap = None
    kickoff = False
    immediate = False
    request_policy = None

    def setup(self, sim):
        pass

    def handle(self, sim, t_us, payload):
        pass

    def congested_peers(self, sim, v):
        return ()


@dataclass
class RunMetrics:
    scheme: str
    seed: int
    n: int
    n_honest: int
    t0_ms: list = field(default_factory=list)
    origins: list = field(default_factory=list)
    coverage_ms: list = field(default_factory=list)  # inf when not all honest got it
    data_bytes: int = 0
    duplicate_bytes: int = 0
    control_bytes: int = 0
    control_bytes_active: int = 0  # sent while some tx was still spreading
    control_bytes_per_window: list = field(default_factory=list)
    fanout_hist: dict = field(default_factory=dict)
    depth_hist: dict = field(default_factory=dict)
    honest_deliveries: int = 0
    body_bytes: int = 300
    discarded_windows: int = 0
    undelivered: int = 0
    first_receipt: list = field(default_factory=list, repr=False)  # per tx, ms

    @property
    def partial(self):
        return self.undelivered > 0

    @property
    def n_tx(self):
        return len(self.coverage_ms)

    @property
    def total_bytes(self):
        return self.data_bytes + self.duplicate_bytes + self.control_bytes

    @property
    def dissemination_bytes(self):
        return self.data_bytes + self.duplicate_bytes

    @property
    def bytes_per_tx(self):
        """Dissemination bytes plus the control traffic of the same period, per tx."""
        return (self.dissemination_bytes + self.control_bytes_active) / max(self.n_tx, 1)

    @property
    def control_fraction(self):
        """Control bytes over data-plane bytes while transactions were spreading."""
        return self.control_bytes_active / max(self.dissemination_bytes, 1)

    @property
    def mean_depth(self):
        tot = sum(self.depth_hist.values())
        return sum(int(k) * v for k, v in self.depth_hist.items()) / max(tot, 1)

    def to_dict(self):
        d = {"version": METRICS_VERSION, "scheme": self.scheme, "seed": self.seed,
             "n": self.n, "n_honest": self.n_honest, "n_tx": self.n_tx,
             "t0_ms": [round(x, 3) for x in self.t0_ms], "origins": list(self.origins),
             "coverage_ms": [None if math.isinf(c) else round(c, 3) for c in self.coverage_ms],
             "data_bytes": self.data_bytes, "duplicate_bytes": self.duplicate_bytes,
             "control_bytes": self.control_bytes,
             "control_bytes_active": self.control_bytes_active,
             "control_bytes_per_window": list(self.control_bytes_per_window),
             "fanout_hist": {str(k): v for k, v in sorted(self.fanout_hist.items())},
             "depth_hist": {str(k): v for k, v in sorted(self.depth_hist.items())},
             "honest_deliveries": self.honest_deliveries, "body_bytes": self.body_bytes,
             "discarded_windows": self.discarded_windows, "undelivered": self.undelivered}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def coverage_time(metrics, i):
    """Coverage time of the ``i``-th tx in ms, or ``inf`` if an honest node missed it."""
    return metrics.coverage_ms[i]


def coverage_from_receipts(first_receipt, t0, honest=None):
    r = np.asarray(first_receipt, dtype=float)
    if honest is not None:
        r = r[honest]
    return float(np.max(r) - t0)


def bandwidth_factor(metrics, reference=None):
    """Overhead beta over one body per honest delivery.

    With ``reference`` (e.g. the random-8 run) returns instead the ratio of
    total bytes per tx, the normalised "bytes/tx" column.
    """
    if reference is not None:
        return metrics.bytes_per_tx / reference.bytes_per_tx
    need = metrics.honest_deliveries * metrics.body_bytes
    if need == 0:
        return 0.0
    return (metrics.dissemination_bytes - need) / need


def percentile(samples, p):
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest sample."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if len(x) == 0:
        raise ValueError("percentile of empty sample")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    rank = max(1, math.ceil(p / 100.0 * len(x) - 1e-12))
    return float(x[rank - 1])


_NEVER = 1 << 62


class _TxState:
    __slots__ = ("rec", "best", "done", "depth", "heard", "sends", "remaining",
                 "nonce_ok", "win_direct", "first_a", "dbest")

    def __init__(self, rec, n):
        self.rec = rec
        self.best = [_NEVER] * n  # best pending completion per node (us)
        self.done = [False] * n
        self.depth = [-1] * n
        self.heard = {}  # sender * n + receiver -> earliest digest arrival (us)
        self.sends = []  # (receiver, digest arrival us, body_direct)
        self.remaining = 0
        self.nonce_ok = False
        self.win_direct = [False] * n
        self.first_a = [_NEVER] * n  # earliest digest arrival per node (us)
        self.dbest = [_NEVER] * n  # earliest pushed body per node (us)


class Simulator:
    """One run: overlay + latency field + scheme (+ adversary)."""

    def __init__(self, overlay, field_, scheme, diss=None, seed=0, adversary=None,
                 horizon_ms=120_000.0):
        self.overlay = overlay
        self.field = field_
        self.scheme = scheme
        self.cfg = diss or DisseminationConfig()
        self.parallel = (scheme.request_policy or self.cfg.request_policy) == "parallel"
        self.seed = seed
        self.adv = adversary or AdversaryConfig()
        self.n = overlay.n
        self.compromised = compromised_mask(self.adv, self.n)
        self.honest = ~self.compromised
        self.horizon_us = to_us(horizon_ms)
        self.now = 0
        self._heap = []
        self._seq = 0
        self._lat_rng = derive_rng(seed, "engine", "latency")
        self._drop_rng = derive_rng(self.adv.seed, "adversary", "blackhole", seed)
        phase_rng = derive_rng(seed, "engine", "phase")
        self.delta_us = to_us(self.cfg.delta_ms)
        self.phase = (phase_rng.integers(0, self.delta_us, self.n) if self.delta_us > 0
                      else np.zeros(self.n, dtype=np.int64))
        self.batch_at = np.full(self.n, -1, dtype=np.int64)
        self.nodes = [NodeState(v, overlay.peers[v], self.cfg, scheme.uses_controller,
                                seed=seed) for v in range(self.n)]
        self.txs = []
        self.control_bytes = 0
        self.control_log = []  # (t_us, bytes)
        self.control_per_window = []
        self.discarded_windows = 0
        self.fanout = Counter()
        self._prop = field_.prop.tolist()
        self._edge_of = [dict(zip(overlay.peers[v].tolist(), overlay.peer_edges[v].tolist()))
                         for v in range(self.n)]
        self._noise_buf = []
        self._noise_pos = 0
        self._tx_events = 0
        self.controller = None
        scheme.setup(self)

    # event plumbing
    def schedule(self, t_us, kind, payload=None):
        if t_us < self.now:
            raise RuntimeError("event scheduled in the past")
        heapq.heappush(self._heap, (int(t_us), self._seq, kind, payload))
        self._seq += 1
        if kind in (DELIVER, BATCH, SUBMIT):
            self._tx_events += 1

    def add_control_bytes(self, nbytes, per_window=False):
        self.control_bytes += int(nbytes)
        self.control_log.append((self.now, int(nbytes)))
        if per_window:
            self.control_per_window.append(int(nbytes))

    # workload
    def submit(self, origin, t0_ms):
        rec = TxRecord(len(self.txs), int(origin), float(t0_ms), self.cfg.digest_bytes,
                       self.cfg.body_bytes)
        st = _TxState(rec, self.n)
        self.txs.append(st)
        self.schedule(to_us(t0_ms), SUBMIT, rec.tx_id)
        return rec

    # sending
    def _refill(self, need):
        f = self.field
        fresh = self._lat_rng.normal(f.jitter_mu, f.jitter_sigma, max(need, 1 << 16))
        self._noise_buf = self._noise_buf[self._noise_pos:] + fresh.tolist()
        self._noise_pos = 0

    def leg_us(self, e, t_us):
        """One sampled one-way delay on edge ``e`` in whole microseconds."""
        f = self.field
        base = self._prop[e]
        if f.episodes:
            base += f.queue_edge(e, t_us / US)
        if f.jitter_sigma:
            if self._noise_pos >= len(self._noise_buf):
                self._refill(1)
            x = base + self._noise_buf[self._noise_pos]
            self._noise_pos += 1
        else:
            x = base + f.jitter_mu
        return int(round(max(x, f.floor_ms) * US))

    def send(self, st, src, targets, t_us, direct=False, self_originated=False):
        """Digest (and, on request, body) from ``src`` to each target.

        Peers that already advertised the tx to ``src`` are skipped; a
        compromised sender may drop the send.  Each surviving send records
        its digest arrival for byte accounting.  Under the ``first`` request
        policy the receiver fetches the body from whichever announcer's
        digest lands first; under ``parallel`` it fetches from every
        announcer heard before its first receipt and keeps the earliest
        completion.
        """
        if not targets:
            return
        self.fanout[len(targets)] += 1
        n = self.n
        heard = st.heard
        drops = (self.adv.drops and self.compromised[src] and not self_originated
                 and self.adv.active(t_us / US))
        edge_of = self._edge_of[src]
        legs = LEGS_DIRECT if direct else LEGS_FULL
        best, done, first_a = st.best, st.done, st.first_a
        parallel = self.parallel
        depth = st.depth[src] + 1
        tx_id = st.rec.tx_id
        f = self.field
        prop = self._prop
        sigma, mu, floor = f.jitter_sigma, f.jitter_mu, f.floor_ms
        t_ms = t_us / US
        need = legs * len(targets)
        if sigma and self._noise_pos + need > len(self._noise_buf):
            self._refill(need)
        buf = self._noise_buf
        for p in targets:
            if heard.get(p * n + src, t_us + 1) <= t_us:
                continue  # p already advertised this tx to src
            if drops and not blackhole_filter(self.adv, src, self.compromised,
                                              self._drop_rng, t_ms):
                continue
            e = edge_of[p]
            base = prop[e] + f.queue_edge(e, t_ms) if f.episodes else prop[e]
            a = c = 0
            for k in range(legs):
                if sigma:
                    x = base + buf[self._noise_pos]
                    self._noise_pos += 1
                else:
                    x = base + mu
                leg = int(round((x if x > floor else floor) * US))
                if k == 0:
                    a = t_us + leg
                    c = a
                else:
                    c += leg
            key = src * n + p
            if a < heard.get(key, a + 1):
                heard[key] = a
            st.sends.append((p, a, direct))
            if done[p]:
                continue
            if parallel:
                if c < best[p]:
                    best[p] = c
                    self.schedule(c, DELIVER, (tx_id, p, src, depth, direct))
            elif direct:
                if c < st.dbest[p]:
                    st.dbest[p] = c
                if c < best[p]:
                    best[p] = c
                    self.schedule(c, DELIVER, (tx_id, p, src, depth, direct))
            elif a < first_a[p]:
                # the earlier announcer takes over the body request
                first_a[p] = a
                if c < st.dbest[p]:
                    best[p] = c
                    self.schedule(c, DELIVER, (tx_id, p, src, depth, direct))

    def reannounce(self, v, tx_ids, targets):
        """Digests of ``tx_ids`` from ``v`` to peers newly added to its list."""
        for tx_id in tx_ids:
            self.send(self.txs[tx_id], v, targets, self.now)

    def _queue_batch(self, v, t_us):
        if self.batch_at[v] >= 0:
            return
        if self.delta_us == 0:
            nxt = t_us
        else:
            k = (t_us - self.phase[v]) // self.delta_us + 1
            nxt = self.phase[v] + k * self.delta_us
        self.batch_at[v] = nxt
        self.schedule(nxt, BATCH, v)

    # handlers
    def _on_submit(self, tx_id):
        st = self.txs[tx_id]
        rec = st.rec
        o = rec.origin
        rec.init_arrays(self.n)
        st.done[o] = True
        st.best[o] = self.now
        st.depth[o] = 0
        st.remaining = int(self.honest.sum()) - int(self.honest[o])
        node = self.nodes[o]
        outburst = self.scheme.outburst
        if outburst and self.scheme.uses_controller:
            node.fallback_check(self.now / US)
            if node.mode != "controller-guided" or self.controller is None:
                outburst = False  # no controller, no nonce
            else:
                w = self.controller.window_id
                rec.outburst_nonce = self.controller.signer.mint_nonce(tx_id, w)
                rec.nonce_window = w
                st.nonce_ok = self.controller.signer.verify_nonce(tx_id, w,
                                                                  rec.outburst_nonce)
                self.add_control_bytes(2 * len(rec.outburst_nonce))
        if self.scheme.immediate:
            node.seen.add(tx_id)
            node.relayed[tx_id] = self.now / US
            self.send(st, o, self._all_peers(o), self.now, self.cfg.body_direct, True)
        else:
            targets = node.on_client_submit(
                rec, self.now / US, self.scheme.congested_peers(self, o), outburst)
            if outburst:
                cap = self.scheme.outburst_cap
                if cap is not None:
                    targets = targets[:cap]
                self.send(st, o, targets, self.now, self.cfg.body_direct, True)
            else:
                self._queue_batch(o, self.now)

    def _all_peers(self, v):
        return self.overlay.peers[v].tolist()

    def _on_deliver(self, payload):
        tx_id, v, src, depth, direct = payload
        st = self.txs[tx_id]
        if st.done[v] or st.best[v] != self.now:
            return
        st.done[v] = True
        st.win_direct[v] = direct
        st.rec.first_receipt[v] = self.now / US
        st.rec.first_sender[v] = src
        st.depth[v] = depth
        if self.honest[v]:
            st.remaining -= 1
        node = self.nodes[v]
        if self.scheme.immediate:
            node.seen.add(tx_id)
            node.relayed[tx_id] = self.now / US
            self.send(st, v, self._all_peers(v), self.now)
        else:
            cl = self.nodes[src].cluster
            targets = node.on_receive(st.rec, src, self.now / US, cl, st.nonce_ok,
                                      self.scheme.kickoff)
            if targets:
                self.send(st, v, targets, self.now)
            elif node.pending:
                self._queue_batch(v, self.now)

    def _on_batch(self, v):
        self.batch_at[v] = -1
        node = self.nodes[v]
        for tx_id, targets in node.batch_cycle(self.now / US):
            st = self.txs[tx_id]
            self.send(st, v, targets, self.now)
        if node.pending:
            self._queue_batch(v, self.now)

    def run(self, until_ms=None):
        """Process events until no tx activity is left or the horizon passes."""
        horizon = self.horizon_us if until_ms is None else to_us(until_ms)
        while self._heap:
            t, _, kind, payload = self._heap[0]
            if t > horizon:
                break
            if kind in (CONTROL, SCHEME) and self._tx_events == 0:
                break
            heapq.heappop(self._heap)
            self.now = t
            if kind in (DELIVER, BATCH, SUBMIT):
                self._tx_events -= 1
            if kind == DELIVER:
                self._on_deliver(payload)
            elif kind == BATCH:
                self._on_batch(payload)
            elif kind == SUBMIT:
                self._on_submit(payload)
            elif kind == CONTROL:
                self.scheme.handle(self, t, payload)
            elif kind == SCHEME:
                self.scheme.handle(self, t, payload)
        return self.metrics()

    def _active_control_bytes(self):
        """Control bytes sent between the first submission and the last receipt."""
        start, end = None, None
        for st in self.txs:
            fr = st.rec.first_receipt
            if fr is None:
                continue
            t0 = to_us(st.rec.t0)
            start = t0 if start is None else min(start, t0)
            last = self.now if not np.all(np.isfinite(fr)) else to_us(float(fr.max()))
            end = last if end is None else max(end, last)
        if start is None:
            return 0
        return sum(b for t, b in self.control_log if start <= t <= end)

    def metrics(self):
        cfg = self.cfg
        m = RunMetrics(self.scheme.name, self.seed, self.n, int(self.honest.sum()),
                       body_bytes=cfg.body_bytes)
        depth = Counter()
        full_b = cfg.full_transfer_bytes
        for st in self.txs:
            rec = st.rec
            m.t0_ms.append(rec.t0)
            m.origins.append(rec.origin)
            if rec.first_receipt is None:  # never submitted before the horizon
                m.coverage_ms.append(math.inf)
                m.undelivered += 1
                m.first_receipt.append(None)
                continue
            fr = rec.first_receipt
            h = fr[self.honest]
            cov = float(h.max() - rec.t0) if np.all(np.isfinite(h)) else math.inf
            if math.isinf(cov):
                m.undelivered += 1
            m.coverage_ms.append(cov)
            m.first_receipt.append(fr)
            got = np.isfinite(fr)
            got[rec.origin] = False
            m.honest_deliveries += int((got & self.honest).sum())
            dep = np.asarray(st.depth)
            for d in dep[self.honest & np.isfinite(fr)].tolist():
                depth[d] += 1
            if st.sends:
                dst, a, direct = (np.array(x) for x in zip(*st.sends))
                direct = direct.astype(bool)
                if self.parallel:
                    rec_us = np.where(np.isfinite(fr), np.rint(fr * US), np.inf)
                    full = a < rec_us[dst]
                else:
                    # one body request per node: the earliest announcement
                    first_a = np.asarray(st.first_a)
                    full = (a == first_a[dst]) & ~direct
                    idx = np.flatnonzero(full)
                    _, keep = np.unique(dst[idx], return_index=True)
                    full[:] = False
                    full[idx[keep]] = True
                cost = np.where(direct, cfg.direct_bytes,
                                np.where(full, full_b, cfg.digest_bytes))
                total = int(cost.sum())
                # the winning transfer per receiving node is the useful one
                win_direct = np.asarray(st.win_direct)[got]
                data = int(win_direct.sum() * cfg.direct_bytes
                           + (~win_direct).sum() * full_b)
                m.data_bytes += data
                m.duplicate_bytes += total - data
        m.control_bytes = self.control_bytes
        m.control_bytes_active = self._active_control_bytes()
        m.control_bytes_per_window = list(self.control_per_window)
        m.fanout_hist = dict(self.fanout)
        m.depth_hist = dict(depth)
        m.discarded_windows = self.discarded_windows
        return m
