"""Benchmark harness: experiment configs, the runner with CSV metrics and
YAML summaries, the brute-force bi-level oracle, and the check suite."""

from .config import ExperimentConfig, dump_config, load_config, parse_config
from .oracle import oracle_bilevel_grad, run_oracle
from .runner import METRICS_COLUMNS, run_experiment
from .checks import check_suite, render_report

__all__ = [
    "ExperimentConfig",
    "METRICS_COLUMNS",
    "check_suite",
    "dump_config",
    "load_config",
    "oracle_bilevel_grad",
    "parse_config",
    "render_report",
    "run_experiment",
    "run_oracle",
]
