"""Run matrices, parameter sweeps and preset comparisons.

Runs share nothing mutable, so a process pool may execute them in any
order; results are always re-sorted by (scheme order, seed) before they
reach a report.
"""
import dataclasses
import logging
import math
import numbers
import os
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import yaml

from . import reports
from .config import ConfigError, from_dict, parse_config, set_path
from .scenario import run_scenario

log = logging.getLogger(__name__)

OUT_ENV = "VCBROADCAST_OUT"
PRESETS = ("table1", "attacks", "fallback")


def _one(args):
    cfg, scheme, seed = args
    return run_scenario(cfg, scheme, seed)


def run_matrix(cfg, workers=1, runs=None):
    """Every ``(scheme, seed)`` of ``cfg``; ordered by scheme then seed."""
    runs = cfg.runs() if runs is None else list(runs)
    jobs = [(cfg, s, seed) for s, seed in runs]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_one, jobs))
    else:
        out = [_one(j) for j in jobs]
    order = {s: i for i, s in enumerate(cfg.scheme_ids)}
    return sorted(out, key=lambda m: (order[m.scheme], m.seed))


def out_root(cfg, override=None):
    """Output root: explicit override, then the environment, then the config."""
    return override or os.environ.get(OUT_ENV) or cfg.output_dir


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return resources.files("vcbroadcast.presets").joinpath(f"{name}.yaml").read_text()


def load_preset(name):
    return parse_config(preset_text(name))


def write_effective(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_yaml())
    return path


def attack_free(cfg):
    """The same matrix with the adversary switched off."""
    return dataclasses.replace(cfg, adversary=dataclasses.replace(cfg.adversary, mode="none",
                                                                  tau=0.0))


@dataclasses.dataclass
class ComparisonResult:
    results: list
    summary: list
    baseline: list = None
    out_dir: str = None

    @property
    def partial_runs(self):
        return sum(m.partial for m in self.results)


def run_comparison(cfg, out_dir=None, workers=1):
    """Matched-seed scheme matrix plus its report files.

    When the config carries an active adversary the attack-free matrix is
    run as well and each summary row reports the median slowdown.
    """
    results = run_matrix(cfg, workers)
    baseline = None
    if cfg.adversary.mode != "none" and cfg.adversary.tau > 0:
        baseline = run_matrix(attack_free(cfg), workers)
    summary = reports.summarize(results, baseline=baseline)
    if out_dir is not None:
        write_effective(cfg, out_dir)
        reports.emit_runs(results, out_dir)
        reports.emit_plotdata(results, out_dir)
        reports.emit_summary(summary, os.path.join(out_dir, "summary.csv"))
        if baseline is not None:
            bdir = os.path.join(out_dir, "baseline")
            reports.emit_runs(baseline, bdir)
            reports.emit_plotdata(baseline, bdir)
    for r in summary:
        if r["partial"]:
            log.warning("%s: %d of %d runs partial", r["scheme"], r["partial_runs"], r["runs"])
    return ComparisonResult(results, summary, baseline, out_dir)


def _lookup(data, path):
    cur = data
    for k in path.split("."):
        if not isinstance(cur, dict) or k not in cur:
            return None
        cur = cur[k]
    return cur


def parse_values(text):
    """Comma-separated sweep values, each read as a YAML scalar."""
    return [yaml.safe_load(v.strip()) for v in str(text).split(",") if v.strip()]


def sweep_configs(base_raw, axis, values):
    """One validated config per value; the base must name a single scheme."""
    base = from_dict(base_raw)
    if len(base.scheme_ids) != 1:
        raise ConfigError("scheme.id", "a sweep runs exactly one scheme")
    eff = base.to_dict()
    parent, _, leaf = axis.rpartition(".")
    holder = _lookup(eff, parent) if parent else eff
    if not isinstance(holder, dict) or leaf not in holder:
        raise ConfigError(axis, "sweep axis does not name a config parameter")
    current = holder[leaf]
    numeric = isinstance(current, numbers.Number) and not isinstance(current, bool)
    numeric = numeric or axis in ("controller.k_override", "controller.d_far",
                                  "controller.halt_at_ms")
    out = []
    for v in values:
        if numeric and (not isinstance(v, numbers.Number) or isinstance(v, bool)):
            raise ConfigError(axis, f"numeric axis got non-numeric value {v!r}")
        out.append((v, from_dict(set_path(base_raw, axis, v))))
    return out


def run_sweep(base_raw, axis, values, out_path=None, workers=1):
    """Long-format sweep rows; seeds derive from the run seed only, never the value."""
    rows = []
    for v, cfg in sweep_configs(base_raw, axis, values):
        rows.extend(reports.sweep_rows(axis, v, run_matrix(cfg, workers)))
    if out_path is not None:
        reports.emit_sweep(rows, out_path)
    return rows


def sweep_medians(rows, stat="median_ms"):
    """Per-value pooled statistic of sweep rows (mean over seeds)."""
    acc = {}
    for r in rows:
        acc.setdefault(r["value"], []).append(r[stat])
    return {v: sum(x) / len(x) if all(math.isfinite(a) for a in x) else math.inf
            for v, x in acc.items()}
