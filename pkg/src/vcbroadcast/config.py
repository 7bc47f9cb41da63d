"""Scenario configuration: a strict YAML schema with resolved defaults.

Every block maps onto a dataclass; unknown keys and ill-typed values are
reported with their dotted path and source line.
"""
import copy
import dataclasses
import itertools
from dataclasses import dataclass, field

import yaml

from .adversary import MODES, AdversaryConfig
from .controller import ControllerConfig
from .dissemination import DisseminationConfig

SCHEME_IDS = ("random8", "blockp2p8", "perigee8", "mercury", "blocksdnvc_noburst",
              "blocksdnvc_full", "flood")


class ConfigError(ValueError):
    def __init__(self, path, message, line=None):
        self.path, self.line = path, line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{path}: {message}{where}")


@dataclass
class TopologyConfig:
    n: int = 1000
    degree_cap: int = 64
    k_continents: int = 3
    intra_range_ms: list = field(default_factory=lambda: [10.0, 60.0])
    inter_multiplier: list = field(default_factory=lambda: [2.0, 5.0])
    jitter_mu_ms: float = 5.0
    jitter_sigma_ms: float = 2.0
    pair_noise: float = 0.05
    congestion_episodes: list = field(default_factory=list)
    seed: int = None  # None: derive from the run seed


@dataclass
class SchemeConfig:
    id: object = None  # one id or a list of ids (comparison matrix)
    params: dict = field(default_factory=dict)  # per scheme id


@dataclass
class AdversaryBlock:
    tau: float = 0.0
    mode: str = "none"
    magnitude_ms: float = 300.0
    period_windows: int = 2
    theta: float = 0.0
    seed: int = None
    forgery: str = "deflate"
    start_ms: float = 0.0


@dataclass
class WorkloadConfig:
    tx_count: int = 500
    rate_tps: float = 10.0
    start_ms: float = 6000.0


@dataclass
class ScenarioConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    controller: dict = field(default_factory=dict)
    dissemination: dict = field(default_factory=dict)
    adversary: AdversaryBlock = field(default_factory=AdversaryBlock)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    horizon_ms: float = 120_000.0
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"

    @property
    def scheme_ids(self):
        return list(self.scheme.id) if isinstance(self.scheme.id, list) else [self.scheme.id]

    def runs(self):
        """``(scheme_id, seed)`` pairs ordered by scheme then seed."""
        return list(itertools.product(self.scheme_ids, self.seeds))

    def controller_config(self):
        return ControllerConfig(**self.controller)

    def dissemination_config(self):
        return DisseminationConfig(**self.dissemination)

    def adversary_config(self, seed):
        a = dataclasses.asdict(self.adversary)
        a["seed"] = seed if a["seed"] is None else a["seed"]
        return AdversaryConfig(**a)

    def to_dict(self):
        return to_plain(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def to_plain(cfg):
    d = dataclasses.asdict(cfg)
    d["controller"] = dataclasses.asdict(cfg.controller_config())
    d["dissemination"] = dataclasses.asdict(cfg.dissemination_config())
    return d


# parsing with source lines

def _to_python(node):
    """YAML node -> (value, lines) where ``lines`` maps dotted sub-paths to lines."""
    lines = {"": node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = _scalar(k)
            val, sub = _to_python(v)
            out[key] = val
            lines[str(key)] = k.start_mark.line + 1
            for p, ln in sub.items():
                if p:
                    lines[f"{key}.{p}"] = ln
        return out, lines
    if isinstance(node, yaml.SequenceNode):
        out = []
        for i, v in enumerate(node.value):
            val, sub = _to_python(v)
            out.append(val)
            for p, ln in sub.items():
                lines[f"{i}.{p}" if p else str(i)] = ln
        return out, lines
    return _scalar(node), lines


def _scalar(node):
    return yaml.safe_load(yaml.serialize(node))


_NUM = (int, float)


def _check_type(path, value, default, line):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}", line)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}", line)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, _NUM):
            raise ConfigError(path, f"expected a number, got {value!r}", line)
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}", line)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}", line)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}", line)
    return value


def _build(cls, data, lines, prefix):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping", lines.get(prefix))
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(path, "unknown key", lines.get(path))
        kwargs[key] = _check_type(path, val, getattr(defaults, key), lines.get(path))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc), lines.get(prefix)) from exc


def _dict_block(cls, data, lines, prefix):
    """Validate a block against ``cls`` but keep it as a plain dict."""
    obj = _build(cls, data, lines, prefix)
    return {k: getattr(obj, k) for k in (data or {})}


def from_dict(data, lines=None):
    lines = lines or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping", 1)
    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(str(key), "unknown key", lines.get(str(key)))
    try:
        cfg = ScenarioConfig(
            topology=_build(TopologyConfig, data.get("topology"), lines, "topology"),
            scheme=_build(SchemeConfig, data.get("scheme"), lines, "scheme"),
            controller=_dict_block(ControllerConfig, data.get("controller"), lines,
                                   "controller"),
            dissemination=_dict_block(DisseminationConfig, data.get("dissemination"), lines,
                                      "dissemination"),
            adversary=_build(AdversaryBlock, data.get("adversary"), lines, "adversary"),
            workload=_build(WorkloadConfig, data.get("workload"), lines, "workload"),
            horizon_ms=_check_type("horizon_ms", data.get("horizon_ms", 120_000.0), 1.0,
                                   lines.get("horizon_ms")),
            seeds=_seeds(data.get("seeds", [0]), lines),
            output_dir=_check_type("output_dir", data.get("output_dir", "out"), "",
                                   lines.get("output_dir")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("<config>", str(exc)) from exc
    _validate(cfg, lines)
    return cfg


def _seeds(value, lines):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if isinstance(value, dict) and set(value) == {"count"}:
        value = list(range(int(value["count"])))
    if (not isinstance(value, list) or not value
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in value)):
        raise ConfigError("seeds", "expected a non-empty list of integers", lines.get("seeds"))
    return value


def _validate(cfg, lines):
    ids = cfg.scheme.id
    if ids in (None, "", []):
        raise ConfigError("scheme.id", "scheme id is required", lines.get("scheme.id",
                                                                          lines.get("scheme")))
    for sid in cfg.scheme_ids:
        if sid not in SCHEME_IDS:
            raise ConfigError("scheme.id", f"unknown scheme {sid!r}", lines.get("scheme.id"))
    for sid in cfg.scheme.params:
        if sid not in SCHEME_IDS:
            raise ConfigError(f"scheme.params.{sid}", "unknown scheme",
                              lines.get(f"scheme.params.{sid}"))
    t = cfg.topology
    if t.n < 2 or t.degree_cap < 2:
        raise ConfigError("topology.n", "need n >= 2 and degree_cap >= 2", lines.get("topology"))
    if len(t.intra_range_ms) != 2 or len(t.inter_multiplier) != 2:
        raise ConfigError("topology", "ranges need two values", lines.get("topology"))
    if t.inter_multiplier[0] < 1:
        raise ConfigError("topology.inter_multiplier", "lower multiplier must be >= 1",
                          lines.get("topology.inter_multiplier"))
    c = cfg.controller
    d_near = c.get("d_near", 6)
    d_max = c.get("d_max", 10)
    d_far = c.get("d_far")
    d_far = d_max - d_near if d_far is None else d_far
    if d_near + d_far > d_max:
        raise ConfigError("controller.d_far", f"d_near + d_far = {d_near + d_far} exceeds "
                          f"d_max = {d_max}", lines.get("controller.d_far",
                                                        lines.get("controller.d_near")))
    try:
        cfg.controller_config()
        cfg.dissemination_config()
    except ValueError as exc:
        raise ConfigError("controller/dissemination", str(exc)) from exc
    if cfg.adversary.mode not in MODES:
        raise ConfigError("adversary.mode", f"unknown mode {cfg.adversary.mode!r}",
                          lines.get("adversary.mode"))
    try:
        cfg.adversary_config(0)
    except ValueError as exc:
        raise ConfigError("adversary", str(exc), lines.get("adversary")) from exc
    if cfg.workload.tx_count < 0 or cfg.workload.rate_tps <= 0:
        raise ConfigError("workload", "need tx_count >= 0 and rate_tps > 0",
                          lines.get("workload"))


def parse_config(text):
    """Parse YAML text into a validated :class:`ScenarioConfig`."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<yaml>", str(exc).splitlines()[0],
                          mark.line + 1 if mark else None) from exc
    if node is None:
        return from_dict({})
    data, lines = _to_python(node)
    return from_dict(data, lines)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def set_path(data, path, value):
    """Return a copy of a raw config dict with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(data)
    cur = out
    keys = path.split(".")
    for k in keys[:-1]:
        if cur.get(k) is None:
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value
    return out


def raw_config(text):
    node = yaml.compose(text)
    return {} if node is None else _to_python(node)[0]
