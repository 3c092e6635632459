import csv
import io
import json
from fractions import Fraction
from types import SimpleNamespace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdsdvfs.costmodel import KernelCost
from tdsdvfs.dag import TaskKind, TaskRef
from tdsdvfs.power import Gear, GearTable, PowerParams
from tdsdvfs.report import (
    COLUMNS,
    EnergyReport,
    ProcessEnergy,
    ReportError,
    compare,
    metrics,
    replay_energy,
    report_csv,
    report_json,
)
from tdsdvfs.sim import Activity, ScheduleEntry, Segment

HIGH, LOW = Gear(2.0, 1.2), Gear(1.0, 1.0)
TABLE = GearTable("two", (HIGH, LOW))


def seg(t0, t1, gear, activity=Activity.IDLE, from_gear=None):
    return Segment(Fraction(t0), Fraction(t1), gear, activity, from_gear=from_gear)


def fake_trace(lanes, schedule=None):
    makespan = max(lane[-1].t_end for lane in lanes)
    return SimpleNamespace(segments=lanes, makespan=makespan, schedule=schedule or {})


def test_energy_is_power_times_time():
    tr = fake_trace([[seg(0, 10, HIGH)]])
    assert replay_energy(tr, PowerParams(0, 0, 7), TABLE).total_energy == 70


def test_three_segment_fixture():
    params = PowerParams(3.0, 2.0, 5.0)
    lanes = [[seg(0, 2, HIGH, Activity.COMPUTE), seg(2, Fraction(5, 2), LOW, Activity.TRANSITION, HIGH),
              seg(Fraction(5, 2), 4, LOW)]]
    p_hi = 3.0 * 2.0 * 1.44 + 2.0 * 1.2 + 5.0  # 16.04 W
    p_lo = 3.0 * 1.0 * 1.0 + 2.0 * 1.0 + 5.0  # 10 W
    hand = p_hi * 2 + p_hi * 0.5 + p_lo * 1.5  # the switch is billed at the hungrier gear
    rep = replay_energy(fake_trace(lanes), params, TABLE)
    assert rep.total_energy == pytest.approx(hand, rel=1e-9)
    assert rep.per_process[0].busy_fraction == pytest.approx(0.5)


def test_symmetric_processes_add_up():
    lane = [seg(0, 1, HIGH, Activity.COMPUTE), seg(1, 3, LOW)]
    params = PowerParams(1, 1, 1)
    one = replay_energy(fake_trace([lane]), params, TABLE).total_energy
    two = replay_energy(fake_trace([lane, list(lane)]), params, TABLE)
    assert two.total_energy == pytest.approx(2 * one, rel=1e-15)
    assert two.total_energy == sum(p.energy for p in two.per_process)


def test_unknown_gear_rejected():
    with pytest.raises(ReportError):
        replay_energy(fake_trace([[seg(0, 1, Gear(9.9, 2.0))]]), PowerParams(1, 1, 1), TABLE)


def test_metrics_flop_rate_per_watt():
    rep = EnergyReport(100.0, 1.0, (), flop_count=1e9)
    assert rep.mflops_per_watt == pytest.approx(10.0)
    slow = EnergyReport(100.0, 2.0, (), flop_count=1e9)
    assert slow.mflops_per_watt == pytest.approx(10.0)
    assert slow.edp_metric == pytest.approx((1e9 / 2.0 / 1e6) / (100.0 / 2.0))


def test_metrics_counts_flops_from_cycles():
    t = TaskRef.factorize(1)
    cost = KernelCost({TaskKind.FACTORIZE: 1e9})
    tr = fake_trace([[seg(0, 1, HIGH, Activity.COMPUTE)]], {t: ScheduleEntry(Fraction(0), Fraction(1), 0)})
    rep = metrics(tr, PowerParams(0, 0, 100), TABLE, cost)
    assert rep.flop_count == 1e9
    assert rep.mflops_per_watt == pytest.approx(10.0)


def test_metrics_empty_trace():
    with pytest.raises(ReportError):
        metrics(SimpleNamespace(segments=[[]], makespan=0, schedule={}), PowerParams(1, 1, 1), TABLE,
                KernelCost({TaskKind.FACTORIZE: 1}))


def _report(e, t, flops=1e9):
    return EnergyReport(e, t, (ProcessEnergy(0, e, 1.0),), flops)


def test_compare_against_self_and_half():
    rows = compare([("orig", _report(100, 2)), ("tx", _report(50, 2))], "orig")
    assert (rows[0].savings_pct, rows[0].loss_pct) == (0, 0)
    assert (rows[1].savings_pct, rows[1].loss_pct) == (50, 0)


def test_compare_missing_baseline():
    with pytest.raises(ReportError):
        compare([("tx", _report(1, 1))], "orig")


@given(st.floats(1, 1e6), st.floats(0.1, 10), st.floats(1e-3, 1e3), st.floats(0.1, 10))
def test_compare_reciprocal(ea, e_ratio, ta, t_ratio):
    # percentages cancel badly for extreme ratios, so stay within an order of magnitude
    reps = {"a": _report(ea, ta), "b": _report(ea * e_ratio, ta * t_ratio)}
    ab = {r.policy: r for r in compare(reps, "b")}["a"]
    ba = {r.policy: r for r in compare(reps, "a")}["b"]
    assert (1 - ab.savings_pct / 100) * (1 - ba.savings_pct / 100) == pytest.approx(1, rel=1e-12)
    assert (1 + ab.loss_pct / 100) * (1 + ba.loss_pct / 100) == pytest.approx(1, rel=1e-12)


def test_serialization_schema():
    rows = compare({"orig": _report(100, 2), "tx": _report(80, 2.1)}, "orig")
    data = json.loads(report_json(rows))
    assert [tuple(d) for d in data] == [COLUMNS, COLUMNS]
    assert data[1]["savings_pct"] == pytest.approx(20)
    parsed = list(csv.DictReader(io.StringIO(report_csv(rows))))
    assert tuple(parsed[0]) == COLUMNS
    assert float(parsed[1]["loss_pct"]) == pytest.approx(5)
    assert json.loads(parsed[1]["per_process"])[0]["process"] == 0
    assert json.loads(report_json(rows[0]))["policy"] == "orig"
