"""Per-node relay state machine: batching, early outburst, kick-off, fallback."""
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng

log = logging.getLogger(__name__)

GUIDED = "controller-guided"
FALLBACK = "fallback"


@dataclass
class DisseminationConfig:
    delta_ms: float = 400.0
    b_max: int = 8000
    t_timeout_s: float = 30.0
    body_direct: bool = False
    digest_bytes: int = 36
    body_bytes: int = 300
    bitmap_bytes: int = 8
    outburst_cap: int = 128
    request_policy: str = "first"  # "first" announcer or "parallel" fetches
    reannounce_ms: float = 10_000.0  # recent relays re-sent to new table entries

    def __post_init__(self):
        if self.delta_ms < 0 or self.b_max < 1 or self.t_timeout_s <= 0:
            raise ValueError("delta_ms >= 0, b_max >= 1 and t_timeout_s > 0 required")
        if self.reannounce_ms < 0:
            raise ValueError("reannounce_ms must be >= 0")
        if self.request_policy not in ("first", "parallel"):
            raise ValueError(f"unknown request_policy {self.request_policy!r}")

    @property
    def full_transfer_bytes(self):
        return self.digest_bytes + self.bitmap_bytes + self.body_bytes

    @property
    def direct_bytes(self):
        return self.digest_bytes + self.body_bytes


@dataclass
class TxRecord:
    tx_id: int
    origin: int
    t0: float  # ms
    digest_size: int = 36
    body_size: int = 300
    outburst_nonce: bytes = None
    nonce_window: int = 0
    first_receipt: np.ndarray = None  # ms, inf if never
    first_sender: np.ndarray = None  # -1 for origin / never

    def init_arrays(self, n):
        self.first_receipt = np.full(n, np.inf)
        self.first_sender = np.full(n, -1, dtype=np.int64)
        self.first_receipt[self.origin] = self.t0
        return self


def mark_congested(queue, percentile=70.0, mode="percentile", utilization=None,
                   threshold=0.70):
    """Edge ids whose queueing delay exceeds the window's ``percentile``.

    ``mode="utilization"`` flags edges whose utilisation exceeds ``threshold``
    instead.  No observations means nothing is flagged.
    """
    if mode == "utilization":
        if utilization is None or len(utilization) == 0:
            return frozenset()
        return frozenset(np.flatnonzero(np.asarray(utilization) > threshold).tolist())
    if mode != "percentile":
        raise ValueError(f"unknown congestion mode {mode!r}")
    if queue is None or len(queue) == 0:
        return frozenset()
    q = np.asarray(queue, dtype=float)
    cut = np.percentile(q, percentile)
    return frozenset(np.flatnonzero(q > cut).tolist())


@dataclass
class NodeState:
    """One node's relay state.

    ``static_list`` serves schemes without a controller.  Controller-driven
    nodes use their authenticated table while the controller is heard from
    and a seeded random subset of ``d_max`` peers once it has been silent
    for longer than ``t_timeout``.  Fallback gossip is push-pull: the node
    also serves ``fallback_pullers``, the peers whose subsets contain it.
    """
    node: int
    peers: np.ndarray
    cfg: DisseminationConfig
    uses_controller: bool = False
    d_max: int = 10
    seed: int = 0
    static_list: tuple = ()
    relay_table: object = None
    last_good_table: object = None
    last_controller_contact: float = 0.0
    mode: str = GUIDED
    pending: deque = field(default_factory=deque)
    seen: set = field(default_factory=set)
    relayed: dict = field(default_factory=dict)  # tx id -> relay time (ms)
    duplicates: int = 0
    fallback_pullers: tuple = ()
    _fallback_list: tuple = None

    @property
    def cluster(self):
        return self.relay_table.cluster_id if self.relay_table is not None else -1

    def fallback_list(self):
        if self._fallback_list is None:
            rng = derive_rng(self.seed, "fallback", self.node)
            m = min(self.d_max, len(self.peers))
            self._fallback_list = tuple(np.sort(rng.choice(self.peers, m, replace=False)).tolist())
        return self._fallback_list

    def fallback_check(self, t):
        if not self.uses_controller:
            return self
        if t - self.last_controller_contact > self.cfg.t_timeout_s * 1000.0:
            if self.mode != FALLBACK:
                log.debug("node %d: controller silent, falling back to gossip", self.node)
            self.mode = FALLBACK
        else:
            self.mode = GUIDED
        return self

    def on_controller_contact(self, t, table=None, verify=None):
        """Heartbeat or table push.  Unverifiable tables are ignored.

        Returns ``(tx_ids, added)``: peers new to the relay list and the txs
        relayed within ``reannounce_ms`` whose digests they should now get.
        A tx relayed under the old list would otherwise never reach a node
        that only the new lists lead to.
        """
        self.last_controller_contact = t
        self.mode = GUIDED
        if table is None or (verify is not None and not verify(table)):
            return [], []
        old = self.relay_table.entries if self.relay_table is not None else None
        self.relay_table = table
        self.last_good_table = table
        return self._reannounce(old, table.entries, t)

    def set_static_list(self, entries, t):
        """Replace the static list; same return value as ``on_controller_contact``."""
        old = self.static_list
        self.static_list = tuple(entries)
        return self._reannounce(old, self.static_list, t)

    def _reannounce(self, old, new, t):
        if not old:
            return [], []
        old = set(old)
        added = [p for p in new if p not in old]
        if not added:
            return [], []
        cut = t - self.cfg.reannounce_ms
        return [x for x, rt in self.relayed.items() if rt >= cut], added

    def relay_list(self, t):
        if not self.uses_controller:
            return self.static_list
        self.fallback_check(t)
        if self.mode == FALLBACK or self.relay_table is None:
            own = self.fallback_list()
            return own + tuple(p for p in self.fallback_pullers if p not in own)
        return self.relay_table.entries

    def on_client_submit(self, tx, t, congested_peers=(), outburst=True):
        """Targets for a locally submitted tx (sent immediately).

        With ``outburst`` the digest goes to every peer except those behind
        links flagged congested, up to ``outburst_cap``; if every link is
        flagged the whole peer set is used.  Without it the tx waits for the
        next batch like any other.
        """
        self.seen.add(tx.tx_id)
        if not outburst:
            self.pending.append(tx.tx_id)
            return []
        self.relayed[tx.tx_id] = t
        bad = set(congested_peers)
        targets = [int(p) for p in self.peers if int(p) not in bad]
        if not targets:
            log.warning("node %d: every link congested, outburst to all peers", self.node)
            targets = self.peers.tolist()
        return targets[:self.cfg.outburst_cap]

    def on_receive(self, tx, sender, t, sender_cluster=-1, nonce_ok=False, kickoff=True):
        """First receipt returns immediate kick-off targets or queues the tx.

        A duplicate only bumps the duplicate counter.
        """
        if tx.tx_id in self.seen:
            self.duplicates += 1
            return []
        self.seen.add(tx.tx_id)
        if (kickoff and nonce_ok and self.uses_controller and self.relay_table is not None
                and self.fallback_check(t).mode == GUIDED
                and sender_cluster != self.relay_table.cluster_id):
            self.relayed[tx.tx_id] = t
            return list(self.relay_table.entries)
        self.pending.append(tx.tx_id)
        return []

    def batch_cycle(self, t):
        """Dequeue up to ``b_max`` txs; returns ``[(tx_id, targets), ...]``."""
        out = []
        targets = None
        while self.pending and len(out) < self.cfg.b_max:
            tx_id = self.pending.popleft()
            if tx_id in self.relayed:
                continue
            self.relayed[tx_id] = t
            if targets is None:
                targets = list(self.relay_list(t))
            out.append((tx_id, targets))
        return out
