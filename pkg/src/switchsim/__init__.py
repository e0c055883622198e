"""Deterministic discrete-event simulator for a wireless cluster that runs
Raft or HotStuff and switches between them at run time based on observed
latency, bandwidth, and misbehavior evidence, carrying committed state
across each switch."""

from .ledger import (
    Checkpoint, Command, CommittedLedger, LedgerEntry, OriginProtocol,
    ProtocolMode, GENESIS_HASH,
)
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario, to_text
from .runner import RunResult, compare_runs, run_scenario
from .reporting import RunReport, build_report, report_from_json, report_to_csv, report_to_json

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Command", "CommittedLedger", "LedgerEntry",
    "OriginProtocol", "ProtocolMode", "GENESIS_HASH",
    "Scenario", "ScenarioError", "load_scenario", "parse_scenario", "to_text",
    "RunResult", "compare_runs", "run_scenario",
    "RunReport", "build_report", "report_from_json", "report_to_csv",
    "report_to_json",
    "__version__",
]
