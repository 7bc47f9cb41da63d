"""Controller-driven schemes, full flooding, and the scheme registry."""
import numpy as np

from ._rng import derive_rng
from .adversary import forge_telemetry
from .baselines import BlockP2P8, Mercury, Perigee8, Random8
from .controller import Controller, ControllerConfig
from .engine import CONTROL, Scheme, to_us

SCHEMES = ("random8", "blockp2p8", "perigee8", "mercury", "blocksdnvc_noburst",
           "blocksdnvc_full")


class Flood(Scheme):
    """Every node relays to all peers on first receipt, no batching.

    Bodies are fetched from every announcer, so first receipt follows the
    shortest 3-leg path.
    """
    name = "flood"
    immediate = True
    request_policy = "parallel"


class BlockSDN(Scheme):
    """Controller-maintained relay tables; ``full`` adds outburst and kick-off."""
    uses_controller = True

    def __init__(self, full=True, controller=None):
        self.full = full
        self.outburst = full
        self.kickoff = full
        self.name = "blocksdnvc_full" if full else "blocksdnvc_noburst"
        self.ccfg = controller or ControllerConfig()
        self._congested = {}

    def setup(self, sim):
        self.ctrl = Controller(sim.overlay, self.ccfg, sim.seed)
        sim.controller = self.ctrl
        self._tel_rng = derive_rng(sim.seed, "controller", "telemetry")
        self.I = sim.overlay.edges[:, 0]
        self.J = sim.overlay.edges[:, 1]
        self.theta_us = to_us(self.ccfg.theta_ms)
        for node in sim.nodes:
            node.d_max = self.ccfg.d_max
        pullers = [[] for _ in sim.nodes]
        for node in sim.nodes:
            for p in node.fallback_list():
                pullers[p].append(node.node)
        for node in sim.nodes:
            node.fallback_pullers = tuple(pullers[node.node])
        sim.schedule(0, CONTROL, "tick")

    def handle(self, sim, t_us, payload):
        t_ms = t_us / 1000.0
        if self.ctrl.halted(t_ms):
            return  # silent from now on
        edges = np.arange(len(self.I))
        delays = sim.field.sample_edges(edges, t_ms, self._tel_rng)
        delays = forge_telemetry(sim.adv, sim.compromised, self.I, self.J, delays,
                                 self.ctrl.window_id + 1, t_ms)
        queue = sim.field.queue_all(t_ms)
        res = self.ctrl.tick(t_ms, self.I, self.J, delays, queue=queue)
        sim.add_control_bytes(res.control_bytes, per_window=True)
        if res.discarded:
            sim.discarded_windows += 1
        verify = self.ctrl.signer.verify_table
        for node in sim.nodes:
            node.on_controller_contact(t_ms)
        for table in res.tables:
            tx_ids, added = sim.nodes[table.owner].on_controller_contact(t_ms, table, verify)
            sim.reannounce(table.owner, tx_ids, added)
        self._congested = {}
        for e in res.congested:
            u, v = (int(x) for x in sim.overlay.edges[e])
            self._congested.setdefault(u, set()).add(v)
            self._congested.setdefault(v, set()).add(u)
        sim.schedule(t_us + self.theta_us, CONTROL, "tick")

    def congested_peers(self, sim, v):
        return self._congested.get(v, ())


def make_scheme(name, controller=None, **params):
    """Build a scheme by id; ``params`` go to the scheme's constructor."""
    if name == "random8":
        return Random8(**params)
    if name == "blockp2p8":
        return BlockP2P8(**params)
    if name == "perigee8":
        return Perigee8(**params)
    if name == "mercury":
        return Mercury(**params)
    if name == "blocksdnvc_full":
        return BlockSDN(True, controller)
    if name == "blocksdnvc_noburst":
        return BlockSDN(False, controller)
    if name == "flood":
        return Flood()
    raise ValueError(f"unknown scheme {name!r}")
