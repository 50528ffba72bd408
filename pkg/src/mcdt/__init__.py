"""Multi-agent cooperative person detection and tracking simulator."""

from .config import ConfigError, ScenarioConfig, config_from_dict, dump_config, load_config
from .runlog import RunLog
from .runner import MetricsReport, metrics_report, run_ablation_suite, run_scenario, simulate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "MetricsReport",
    "RunLog",
    "ScenarioConfig",
    "config_from_dict",
    "dump_config",
    "load_config",
    "metrics_report",
    "run_ablation_suite",
    "run_scenario",
    "simulate",
]
