"""Scenarios, metrics, baselines and the experiment loop."""

from bsense.harness.config import ExperimentConfig, config_from_dict, dump_config, load_config
from bsense.harness.experiment import ExperimentResult, run_experiment, run_pmp_comparison
from bsense.harness.metrics import pcd_pug
from bsense.harness.scenarios import SCENARIO_NAMES, Scenario, make_scenario
from bsense.harness.trace import TraceRecord, export_trace, load_trace

__all__ = [
    "ExperimentConfig", "ExperimentResult", "SCENARIO_NAMES", "Scenario", "TraceRecord", "config_from_dict",
    "dump_config", "export_trace", "load_config", "load_trace", "make_scenario", "pcd_pug", "run_experiment",
    "run_pmp_comparison",
]
