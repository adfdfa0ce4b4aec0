"""Experiment orchestration and report writing."""

from .orchestrator import ExperimentOrchestrator, build_comparison_report, exit_code_for
from .reporting import ensure_writable, write_channels_csv, write_json, write_study_csv

__all__ = [
    "ExperimentOrchestrator",
    "build_comparison_report",
    "exit_code_for",
    "ensure_writable",
    "write_channels_csv",
    "write_json",
    "write_study_csv",
]
