"""Energy accounting of simulated traces and policy comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .costmodel import KernelCost
from .power import GearTable, PowerParams, node_power


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessEnergy:
    process: int
    energy: float
    busy_fraction: float  # share of the makespan spent computing or sending

    def to_dict(self) -> dict:
        return {"process": self.process, "energy_j": self.energy, "busy_fraction": self.busy_fraction}


@dataclass(frozen=True)
class EnergyReport:
    total_energy: float
    makespan: float
    per_process: tuple[ProcessEnergy, ...]
    flop_count: float = 0.0

    @property
    def mflops_per_watt(self) -> float:
        """Flop rate per average watt; the makespan cancels out."""
        if self.total_energy <= 0:
            raise ReportError("energy must be positive to rate efficiency")
        return self.flop_count / 1e6 / self.total_energy

    edp_metric = mflops_per_watt

    @property
    def average_power(self) -> float:
        return self.total_energy / self.makespan


def segment_power(params: PowerParams, seg) -> float:
    """Watts drawn during a segment; a gear switch is billed at the hungrier gear."""
    p = node_power(params, seg.gear)
    if seg.from_gear is not None:
        p = max(p, node_power(params, seg.from_gear))
    return p


def replay_energy(trace, params: PowerParams, table: GearTable) -> EnergyReport:
    """Integrate node power over every process's segment timeline."""
    known = set(table.gears)
    per_process = []
    makespan = float(trace.makespan)
    for rank, segments in enumerate(trace.segments):
        terms, busy = [], 0.0
        for seg in segments:
            if seg.gear not in known or (seg.from_gear is not None and seg.from_gear not in known):
                raise ReportError(f"segment gear not in table {table.name!r}: {seg}")
            dt = float(seg.t_end - seg.t_start)
            terms.append(segment_power(params, seg) * dt)
            if seg.activity.value in ("compute", "communicate"):
                busy += dt
        per_process.append(ProcessEnergy(rank, math.fsum(terms), busy / makespan if makespan > 0 else 0.0))
    total = math.fsum(p.energy for p in per_process)
    return EnergyReport(total, makespan, tuple(per_process))


def metrics(trace, params: PowerParams, table: GearTable, cost: KernelCost) -> EnergyReport:
    """Energy report with the flop count filled in (one flop per cycle)."""
    if not trace.schedule or not any(trace.segments):
        raise ReportError("empty trace")
    base = replay_energy(trace, params, table)
    flops = float(sum(cost.cycles(t) for t in trace.schedule))
    return EnergyReport(base.total_energy, base.makespan, base.per_process, flops)


@dataclass(frozen=True)
class ComparisonRow:
    policy: str
    total_energy_j: float
    makespan_s: float
    mflops_per_watt: float
    savings_pct: float
    loss_pct: float
    per_process: tuple[ProcessEnergy, ...]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "total_energy_j": self.total_energy_j,
            "makespan_s": self.makespan_s,
            "mflops_per_watt": self.mflops_per_watt,
            "savings_pct": self.savings_pct,
            "loss_pct": self.loss_pct,
            "per_process": [p.to_dict() for p in self.per_process],
        }


COLUMNS = ("policy", "total_energy_j", "makespan_s", "mflops_per_watt", "savings_pct", "loss_pct", "per_process")


def compare(
    reports: Sequence[tuple[str, EnergyReport]] | Mapping[str, EnergyReport], baseline: str
) -> list[ComparisonRow]:
    """Energy savings and performance loss of each policy relative to ``baseline``.

    Percentages are relative to the model's own baseline run, not measured
    hardware numbers.
    """
    items = list(reports.items()) if isinstance(reports, Mapping) else list(reports)
    by_name = dict(items)
    if baseline not in by_name:
        raise ReportError(f"baseline {baseline!r} not among reported policies")
    base = by_name[baseline]
    if base.total_energy <= 0 or base.makespan <= 0:
        raise ReportError("baseline energy and makespan must be positive")
    rows = []
    for name, r in items:
        rows.append(
            ComparisonRow(
                policy=name,
                total_energy_j=r.total_energy,
                makespan_s=r.makespan,
                mflops_per_watt=r.mflops_per_watt if r.flop_count else 0.0,
                savings_pct=(base.total_energy - r.total_energy) / base.total_energy * 100,
                loss_pct=(r.makespan - base.makespan) / base.makespan * 100,
                per_process=r.per_process,
            )
        )
    return rows


def report_json(row_or_rows: ComparisonRow | Iterable[ComparisonRow]) -> str:
    if isinstance(row_or_rows, ComparisonRow):
        return json.dumps(row_or_rows.to_dict(), indent=1)
    return json.dumps([r.to_dict() for r in row_or_rows], indent=1)


def report_csv(rows: Iterable[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        d = r.to_dict()
        d["per_process"] = json.dumps(d["per_process"])
        w.writerow([d[c] for c in COLUMNS])
    return buf.getvalue()


def single_row(policy: str, report: EnergyReport) -> ComparisonRow:
    """A report compared against itself (0% savings, 0% loss)."""
    return compare([(policy, report)], policy)[0]
