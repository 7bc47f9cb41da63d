"""Build a world from a config and run one (scheme, seed) pair."""
import dataclasses
import logging

import numpy as np

from ._rng import derive_rng, derive_seed
from .engine import Simulator
from .overlay import build_overlay, generate_geo_latency
from .schemes import make_scheme

log = logging.getLogger(__name__)

_WORLD_CACHE = {}


def build_world(topology, seed):
    """Overlay plus latency field for a topology block and run seed (cached)."""
    tseed = seed if topology.seed is None else topology.seed
    key = (repr(dataclasses.asdict(topology)), tseed)
    if key not in _WORLD_CACHE:
        if len(_WORLD_CACHE) > 8:
            _WORLD_CACHE.clear()
        ov = build_overlay(topology.n, topology.degree_cap, derive_seed(tseed, "overlay"))
        fld = generate_geo_latency(
            ov, topology.k_continents, tuple(topology.intra_range_ms),
            tuple(topology.inter_multiplier),
            (topology.jitter_mu_ms, topology.jitter_sigma_ms),
            derive_seed(tseed, "latency"), topology.pair_noise,
            episodes=[dict(e) for e in topology.congestion_episodes])
        _WORLD_CACHE[key] = (ov, fld)
    ov, fld = _WORLD_CACHE[key]
    # the field carries a jitter stream; hand out a fresh copy per run
    return ov, dataclasses.replace(fld, episodes=list(fld.episodes))


def workload_arrivals(workload, n, honest, seed):
    """Poisson arrival times (ms) and uniformly random honest origins."""
    rng = derive_rng(seed, "workload")
    m = workload.tx_count
    gaps = rng.exponential(1000.0 / workload.rate_tps, m)
    times = workload.start_ms + np.cumsum(gaps) - gaps[0] if m else np.empty(0)
    pool = np.flatnonzero(honest)
    origins = pool[rng.integers(0, len(pool), m)]
    return times, origins


def make_simulator(cfg, scheme_id, seed):
    overlay, fld = build_world(cfg.topology, seed)
    params = dict(cfg.scheme.params.get(scheme_id, {}) or {})
    scheme = make_scheme(scheme_id, controller=cfg.controller_config(), **params)
    return Simulator(overlay, fld, scheme, cfg.dissemination_config(), seed,
                     cfg.adversary_config(seed), cfg.horizon_ms)


def run_scenario(cfg, scheme_id=None, seed=None):
    """Run one (scheme, seed) of ``cfg`` and return its :class:`RunMetrics`."""
    scheme_id = cfg.scheme_ids[0] if scheme_id is None else scheme_id
    seed = cfg.seeds[0] if seed is None else seed
    sim = make_simulator(cfg, scheme_id, seed)
    times, origins = workload_arrivals(cfg.workload, sim.n, sim.honest, seed)
    for t, o in zip(times.tolist(), origins.tolist()):
        sim.submit(o, t)
    metrics = sim.run()
    if metrics.partial:
        log.warning("%s seed %d: %d txs not delivered to every honest node", scheme_id,
                    seed, metrics.undelivered)
    return metrics
