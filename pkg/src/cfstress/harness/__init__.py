"""Experiment orchestration: configs, runs, reports, charts and the CLI."""

from cfstress.harness.config import ExperimentConfig, ShiftAxis, classifier_label, load, loads
from cfstress.harness.report import emit_bar_chart, emit_report, report_from_json
from cfstress.harness.run import RunReport, run_experiment

__all__ = [
    "ExperimentConfig", "RunReport", "ShiftAxis", "classifier_label", "emit_bar_chart",
    "emit_report", "load", "loads", "report_from_json", "run_experiment",
]
