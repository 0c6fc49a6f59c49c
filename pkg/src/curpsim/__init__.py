"""Simulated primary-backup key-value store with witness-based 1-RTT updates."""

from curpsim.checker import Verdict, check_linearizable, classify_rtt
from curpsim.cluster import Cluster
from curpsim.harness import MetricsReport, Scenario, run_associativity_experiment, run_scenario
from curpsim.sim import Crash, Delay, FaultPlan, Partition, Simulator

__all__ = [
    "Cluster", "Crash", "Delay", "FaultPlan", "MetricsReport", "Partition", "Scenario", "Simulator",
    "Verdict", "check_linearizable", "classify_rtt", "run_associativity_experiment", "run_scenario",
]
