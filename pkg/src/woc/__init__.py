"""Dual-path weighted consensus: protocol state machines, simulator, checker and harness."""

from .harness import MetricsReport, ScenarioConfig, percentile, run_scenario, sweep
from .weights import (check_invariants, consensus_threshold, feasible_ratio_interval, geometric_weights,
                      rank_and_assign)

__all__ = [
    "MetricsReport", "ScenarioConfig", "check_invariants", "consensus_threshold",
    "feasible_ratio_interval", "geometric_weights", "percentile", "rank_and_assign",
    "run_scenario", "sweep",
]
__version__ = "0.1.0"
