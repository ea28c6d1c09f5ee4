"""Configuration, reports and experiment runners behind the ``genq`` CLI."""
from genq.harness.commands import COMMANDS, build_pool, run_command
from genq.harness.config import ExperimentConfig, load_config, loads
from genq.harness.report import HEADER, Report, ReportRow, parse_report, read_report

__all__ = ["COMMANDS", "ExperimentConfig", "HEADER", "Report", "ReportRow", "build_pool",
           "load_config", "loads", "parse_report", "read_report", "run_command"]
