"""Controller-guided transaction broadcast over a virtual coordinate system.

The package simulates a blockchain overlay in which a controller embeds
nodes from delay telemetry, clusters them, and hands each node a signed
relay table.  Baseline schemes, an adversary model and an experiment
harness sit alongside.
"""
from .adversary import AdversaryConfig
from .cluster import KMeansClustering, RelayTable, build_relay_tables
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .controller import Controller, ControllerConfig
from .dissemination import DisseminationConfig
from .embedding import CoordinateEmbedding
from .engine import RunMetrics, Simulator, bandwidth_factor, coverage_time, percentile
from .harness import run_comparison, run_matrix, run_sweep
from .overlay import LatencyField, Overlay, build_overlay, generate_geo_latency
from .reports import emit_plotdata
from .scenario import run_scenario
from .schemes import make_scheme

__version__ = "0.1.0"

__all__ = [
    "AdversaryConfig", "ConfigError", "Controller", "ControllerConfig", "CoordinateEmbedding",
    "DisseminationConfig", "KMeansClustering", "LatencyField", "Overlay", "RelayTable",
    "RunMetrics", "ScenarioConfig", "Simulator", "bandwidth_factor", "build_overlay",
    "build_relay_tables", "coverage_time", "emit_plotdata", "generate_geo_latency",
    "load_config", "make_scheme", "parse_config", "percentile", "run_comparison",
    "run_matrix", "run_scenario", "run_sweep",
]
