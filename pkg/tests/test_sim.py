from fractions import Fraction

import pytest

from tdsdvfs.costmodel import CommModel
from tdsdvfs.dag import TaskRef, generate_graph
from tdsdvfs.policies import POLICY_NAMES
from tdsdvfs.power import PowerParams, node_power
from tdsdvfs.report import replay_energy
from tdsdvfs.sim import Activity, ConfigError, SimConfig, resolve, simulate

from .oracles import check_trace_invariants

F, S, U1, U2 = TaskRef.factorize, TaskRef.solve, TaskRef.update1, TaskRef.update2
HZ_HIGH = Fraction(25, 10) * 10**9  # default table f_h


def cfg(**kw):
    base = dict(kind="cholesky", n_blocks=4, p_rows=2, p_cols=2, block_size=64)
    base.update(kw)
    return SimConfig(**base)


def test_single_task_single_process():
    tr = simulate(cfg(n_blocks=1, p_rows=1, p_cols=1))
    (seg,) = tr.segments[0]
    cycles = Fraction(64**3, 3)
    assert seg.activity is Activity.COMPUTE and seg.task == F(1)
    assert seg.duration == cycles / HZ_HIGH == tr.makespan


def test_chain_on_one_process_sums_durations():
    tr = simulate(cfg(n_blocks=2, p_rows=1, p_cols=1))
    setup = tr.setup
    total = sum(setup.cost.cycles(t) for t in setup.graph.tasks) / HZ_HIGH
    assert tr.makespan == total
    assert all(s.activity is Activity.COMPUTE for s in tr.segments[0])


@pytest.mark.parametrize("policy", POLICY_NAMES)
@pytest.mark.parametrize("kind", ["cholesky", "lu", "qr"])
def test_invariants_hold_for_every_policy(policy, kind):
    tr = simulate(cfg(kind=kind, n_blocks=6, policy=policy))
    check_trace_invariants(tr)
    assert set(tr.gears_used()) <= set(tr.setup.table.gears)


@pytest.mark.parametrize("policy", POLICY_NAMES)
def test_invariants_on_rectangular_grid(policy):
    check_trace_invariants(simulate(cfg(n_blocks=7, p_rows=1, p_cols=3, policy=policy, block_size=128)))


@pytest.mark.parametrize("policy", ["orig", "tx", "fermata", "cp"])
def test_deterministic(policy):
    c = cfg(n_blocks=6, policy=policy)
    a, b = simulate(c), simulate(c)
    assert a.fingerprint() == b.fingerprint()
    assert a.trace_csv() == b.trace_csv()
    assert a.schedule_csv() == b.schedule_csv()


def test_tx_uses_two_gears_only():
    tr = simulate(cfg(n_blocks=8, policy="tx"))
    table = tr.setup.table
    assert tr.gears_used() == {table.high, table.low}


def test_tx_halt_before_first_done_flag():
    tr = simulate(cfg(policy="tx"))
    setup = tr.setup
    table, lat = setup.table, Fraction(repr(setup.transition_latency))
    lanes = {}
    for t, e in tr.schedule.items():
        lanes.setdefault(e.process, []).append(t)
    halted = 0
    for rank, lane in enumerate(tr.segments):
        first = min(lanes[rank])
        if not setup.graph.tds_in[first]:
            continue
        # dropped to f_l right away, halted, then switched back up when the last flag came in
        assert lane[0].activity is Activity.TRANSITION and lane[0].gear == table.low
        assert lane[1].activity is Activity.IDLE and lane[1].gear == table.low and lane[1].wait == "pre"
        flag_in = max(tr.flag_arrivals[(u, first)] for u in setup.graph.tds_in[first])
        assert lane[1].t_start == lat
        assert lane[1].t_end == flag_in
        assert tr.schedule[first].start == flag_in + lat
        halted += 1
    assert halted >= 1


def test_tx_waits_for_flags_after_data():
    tr = simulate(cfg(n_blocks=6, policy="tx"))
    g = tr.setup.graph
    for t, e in tr.schedule.items():
        for u in g.tds_in[t]:
            assert e.start >= tr.flag_arrivals[(u, t)]
            if (u, e.process) in tr.data_arrivals:
                assert tr.flag_arrivals[(u, t)] >= tr.data_arrivals[(u, e.process)]


def test_tx_doneflag_zero_latency_is_faster():
    slow = simulate(cfg(n_blocks=6, policy="tx"))
    fast = simulate(cfg(n_blocks=6, policy="tx", doneflag_zero_latency=True))
    assert fast.makespan < slow.makespan
    check_trace_invariants(fast)


def test_tx_process_stays_low_after_last_task():
    tr = simulate(cfg(policy="tx"))
    table = tr.setup.table
    for lane in tr.segments:
        tail = [s for s in lane if s.wait == "post"]
        assert all(s.gear == table.low for s in tail)


def test_orig_never_switches():
    tr = simulate(cfg(n_blocks=6))
    assert not any(s.activity is Activity.TRANSITION for lane in tr.segments for s in lane)


def test_sc_lib_pre_start_idle_stays_high():
    tr = simulate(cfg(policy="sc-lib"))
    table = tr.setup.table
    pre = [s for lane in tr.segments for s in lane if s.wait == "pre"]
    assert pre and all(s.gear == table.high for s in pre)
    span = [s for lane in tr.segments for s in lane if s.wait == "span"]
    assert all(s.gear == table.low for s in span)


@pytest.mark.parametrize("n,grid", [(4, (1, 1)), (4, (2, 2)), (8, (2, 2)), (6, (1, 3))])
def test_cp_theo_keeps_orig_makespan(n, grid):
    a = simulate(cfg(n_blocks=n, p_rows=grid[0], p_cols=grid[1], block_size=256))
    b = simulate(cfg(n_blocks=n, p_rows=grid[0], p_cols=grid[1], block_size=256, policy="cp-theo"))
    assert b.makespan == a.makespan


def test_cp_theo_splits_some_task():
    tr = simulate(cfg(n_blocks=8, block_size=256, policy="cp-theo"))
    by_task = {}
    for lane in tr.segments:
        for s in lane:
            if s.activity is Activity.COMPUTE:
                by_task.setdefault(s.task, set()).add(s.gear)
    assert any(len(gears) == 2 for gears in by_task.values())
    assert tr.energy().total_energy < simulate(cfg(n_blocks=8, block_size=256)).energy().total_energy


def test_zero_transition_latency():
    tr = simulate(cfg(n_blocks=6, policy="tx", transition_latency=0.0))
    check_trace_invariants(tr)
    assert not any(s.activity is Activity.TRANSITION for lane in tr.segments for s in lane)


def test_fermata_interrupts_computation():
    tr = simulate(cfg(n_blocks=6, block_size=256, policy="fermata", policy_params={"interval": 0.002}))
    check_trace_invariants(tr)
    per_task = {}
    for lane in tr.segments:
        for s in lane:
            if s.activity is Activity.COMPUTE:
                per_task[s.task] = per_task.get(s.task, 0) + 1
    assert max(per_task.values()) > 1


def test_cpuspeed_without_busy_poll_scales_down():
    tr = simulate(cfg(n_blocks=6, block_size=256, policy="cpuspeed", policy_params={"busy_poll": False}))
    check_trace_invariants(tr)
    assert len(tr.gears_used()) > 1


# -- energy replay -------------------------------------------------------------------


def test_replay_matches_hand_sum():
    tr = simulate(cfg(n_blocks=5, policy="tx"))
    params, table = tr.setup.power, tr.setup.table
    rep = replay_energy(tr, params, table)
    hand = 0.0
    for lane in tr.segments:
        for s in lane:
            p = node_power(params, s.gear)
            if s.from_gear is not None:
                p = max(p, node_power(params, s.from_gear))
            hand += p * float(s.duration)
    assert rep.total_energy == pytest.approx(hand, rel=1e-12)
    assert rep.total_energy == pytest.approx(sum(p.energy for p in rep.per_process), rel=1e-12)
    assert replay_energy(tr, params, table) == rep


def test_tx_equals_orig_on_single_process_chain():
    a = simulate(cfg(n_blocks=3, p_rows=1, p_cols=1))
    b = simulate(cfg(n_blocks=3, p_rows=1, p_cols=1, policy="tx"))
    assert a.makespan == b.makespan
    assert a.energy() == b.energy()


def test_tx_beats_orig_when_halting():
    # default block size; with tiny blocks the switch latency outweighs the halts
    orig = simulate(cfg(block_size=256)).energy().total_energy
    tx = simulate(cfg(block_size=256, policy="tx"))
    assert any(s.activity is Activity.IDLE and s.gear == tx.setup.table.low for lane in tx.segments for s in lane)
    assert tx.energy().total_energy < orig


@pytest.mark.parametrize("n", [8, 10])
def test_policy_energy_ordering(n):
    e = {p: simulate(cfg(n_blocks=n, block_size=256, policy=p)).energy().total_energy for p in ("orig", "sc-lib", "tx")}
    assert e["tx"] < e["sc-lib"] < e["orig"]


# -- configuration ---------------------------------------------------------------------


def test_config_roundtrip():
    c = cfg(policy="tx", policy_params={"interval": 0.02}, kernel_cycles={"Factorize": 10.0, "Solve": 20.0,
                                                                         "Update1": 30.0, "Update2": 40.0})
    back = SimConfig.from_json(c.to_json())
    assert back.to_dict() == c.to_dict()
    assert simulate(back).fingerprint() == simulate(c).fingerprint()


def test_config_kernel_cycles_override():
    c = cfg(n_blocks=1, p_rows=1, p_cols=1, kernel_cycles={"Factorize": 2.5e9})
    assert simulate(c).makespan == 1


@pytest.mark.parametrize(
    "bad,field",
    [
        ({"grid": {"p_rows": 0}}, "grid.p_rows"),
        ({"policy": "magic"}, "policy"),
        ({"graph": {"kind": "cholesky", "n_blocks": "4"}}, "graph.n_blocks"),
        ({"colour": 1}, "colour"),
        ({"schema_version": 99}, "schema_version"),
        ({"power": {"ac": 1}}, "power.i_sub"),
        ({"comm": {"cpu_bound_fraction": 2.0}}, "comm"),
        ({"doneflag_zero_latency": 1}, "doneflag_zero_latency"),
    ],
)
def test_config_errors_name_the_field(bad, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        SimConfig.from_dict(bad)


def test_config_unresolvable_names():
    with pytest.raises(ConfigError):
        resolve(SimConfig(gear_table="z80"))
    with pytest.raises(ConfigError):
        resolve(SimConfig(kind="svd"))


def test_config_graph_path(tmp_path):
    path = tmp_path / "g.json"
    path.write_text(generate_graph("lu", 4).to_json())
    tr = simulate(SimConfig(graph_path=str(path), p_rows=2, p_cols=2, block_size=64))
    ref = simulate(SimConfig(kind="lu", n_blocks=4, p_rows=2, p_cols=2, block_size=64))
    assert tr.fingerprint() == ref.fingerprint()


def test_custom_power_and_comm():
    c = cfg(power=PowerParams(1, 1, 1), comm=CommModel(cpu_bound_fraction=0.0, block_size=64))
    check_trace_invariants(simulate(c))


def test_trace_csv_columns():
    tr = simulate(cfg(n_blocks=2))
    lines = tr.trace_csv().splitlines()
    assert lines[0] == "process,t_start,t_end,ghz,volts,watts,activity,task"
    assert tr.schedule_csv().splitlines()[0] == "task,kind,row,col,process,start,finish"
    assert len(tr.schedule_csv().splitlines()) == 1 + 4
