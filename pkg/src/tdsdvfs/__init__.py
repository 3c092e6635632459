"""Energy-efficient DVFS scheduling of dense matrix factorizations, simulated."""

from .dag import ProcessGrid, TaskGraph, TaskKind, TaskRef, compute_slack, generate_crit_path, generate_graph
from .power import GEAR_TABLES, Gear, GearTable, PowerParams, energy_ratio, split_schedule
from .report import EnergyReport, compare, metrics
from .sim import SimConfig, SimTrace, simulate

__version__ = "0.1.0"

__all__ = [
    "ProcessGrid", "TaskGraph", "TaskKind", "TaskRef", "compute_slack", "generate_crit_path", "generate_graph",
    "GEAR_TABLES", "Gear", "GearTable", "PowerParams", "energy_ratio", "split_schedule",
    "EnergyReport", "compare", "metrics", "SimConfig", "SimTrace", "simulate",
]
