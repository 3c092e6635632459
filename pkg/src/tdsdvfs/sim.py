"""Deterministic discrete-event execution of a task graph under a DVFS policy.

Every process of the grid runs its tasks in program order.  A finished task
sends its block to each other process holding a dependent, one blocking
point-to-point message per destination.  Gear switches take a fixed
latency during which nothing progresses.  Simulated time is kept as exact
rationals so cycle conservation and segment tiling hold exactly.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping

from .costmodel import DEFAULT_TRANSITION_LATENCY, CommModel, KernelCost
from .dag import ProcessGrid, TaskGraph, TaskKind, TaskRef, critical_path_method, generate_crit_path, generate_graph, program_order
from .policies import (
    AdagioController,
    Controller,
    CpTheoController,
    CpuSpeedController,
    FermataController,
    IntervalStats,
    OrigController,
    PolicyDecision,
    ScLibController,
    TxController,
    TxState,
    cp_decide,
    validate_policy,
)
from .power import DEFAULT_GEAR_TABLE, DEFAULT_POWER_PARAMS, Gear, GearTable, PowerParams, load_gear_table
from .report import EnergyReport, replay_energy, segment_power

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "SimulationError",
    "Activity",
    "Segment",
    "ScheduleEntry",
    "SimConfig",
    "SimTrace",
    "Setup",
    "resolve",
    "simulate",
    "run",
    "plan_cp_theo",
    "replay_energy",
    "EnergyReport",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


def exact(x) -> Fraction:
    """Exact rational of a number's shortest decimal form (0.1 -> 1/10)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


class Activity(str, enum.Enum):
    COMPUTE = "compute"
    COMMUNICATE = "communicate"
    IDLE = "idle"
    TRANSITION = "transition"


@dataclass(frozen=True)
class Segment:
    """One constant-gear stretch of a process timeline.

    ``from_gear`` is set on transitions only; ``cycles`` on compute only;
    ``wait`` tells an idle segment before the first task ("pre"), between
    tasks ("span") and after the last one ("post") apart.
    """

    t_start: Fraction
    t_end: Fraction
    gear: Gear
    activity: Activity
    task: TaskRef | None = None
    from_gear: Gear | None = None
    cycles: Fraction = Fraction(0)
    wait: str | None = None

    @property
    def duration(self) -> Fraction:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class ScheduleEntry:
    start: Fraction
    finish: Fraction
    process: int


# -- configuration -------------------------------------------------------

_TOP_KEYS = {
    "schema_version", "graph", "grid", "gear_table", "power", "kernel_cycles", "comm",
    "transition_latency", "policy", "policy_params", "doneflag_zero_latency", "seed",
}


@dataclass
class SimConfig:
    kind: str = "cholesky"
    n_blocks: int = 4
    graph_path: str | None = None  # overrides kind/n_blocks when set
    p_rows: int = 1
    p_cols: int = 1
    block_size: int = 256
    gear_table: str = DEFAULT_GEAR_TABLE  # built-in key or JSON path
    power: PowerParams = DEFAULT_POWER_PARAMS
    kernel_cycles: dict[str, float] | None = None  # per task-kind label; default from flop counts
    comm: CommModel | None = None  # default: CommModel(block_size=block_size)
    transition_latency: float = DEFAULT_TRANSITION_LATENCY
    policy: str = "orig"
    policy_params: dict = field(default_factory=dict)
    doneflag_zero_latency: bool = False
    seed: int = 0  # reserved; every policy is deterministic

    def to_dict(self) -> dict:
        comm = self.comm or CommModel(block_size=self.block_size)
        graph = {"path": self.graph_path} if self.graph_path else {"kind": self.kind, "n_blocks": self.n_blocks}
        d = {
            "schema_version": SCHEMA_VERSION,
            "graph": graph,
            "grid": {"p_rows": self.p_rows, "p_cols": self.p_cols, "block_size": self.block_size},
            "gear_table": self.gear_table,
            "power": {"ac": self.power.ac, "i_sub": self.power.i_sub, "p_const": self.power.p_const},
            "comm": {
                "latency_startup": comm.latency_startup,
                "bytes_per_second": comm.bytes_per_second,
                "cpu_bound_fraction": comm.cpu_bound_fraction,
            },
            "transition_latency": self.transition_latency,
            "policy": self.policy,
            "policy_params": dict(self.policy_params),
            "doneflag_zero_latency": self.doneflag_zero_latency,
            "seed": self.seed,
        }
        if self.kernel_cycles is not None:
            d["kernel_cycles"] = dict(self.kernel_cycles)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - _TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {version!r} (expected {SCHEMA_VERSION})")
        cfg = cls()
        graph = _section(d, "graph")
        if "path" in graph:
            cfg.graph_path = _typed(graph, "path", str, "graph.path")
        else:
            cfg.kind = _typed(graph, "kind", str, "graph.kind", cfg.kind)
            cfg.n_blocks = _typed(graph, "n_blocks", int, "graph.n_blocks", cfg.n_blocks)
        grid = _section(d, "grid")
        cfg.p_rows = _typed(grid, "p_rows", int, "grid.p_rows", cfg.p_rows)
        cfg.p_cols = _typed(grid, "p_cols", int, "grid.p_cols", cfg.p_cols)
        cfg.block_size = _typed(grid, "block_size", int, "grid.block_size", cfg.block_size)
        cfg.gear_table = _typed(d, "gear_table", str, "gear_table", cfg.gear_table)
        if "power" in d:
            p = _section(d, "power")
            try:
                cfg.power = PowerParams(
                    *(float(_typed(p, k, (int, float), f"power.{k}")) for k in ("ac", "i_sub", "p_const"))
                )
            except ValueError as exc:
                raise ConfigError(f"power: {exc}") from None
        if "kernel_cycles" in d:
            kc = _section(d, "kernel_cycles")
            cfg.kernel_cycles = {k: float(_typed(kc, k, (int, float), f"kernel_cycles.{k}")) for k in kc}
        comm = _section(d, "comm")
        try:
            cfg.comm = CommModel(
                latency_startup=float(_typed(comm, "latency_startup", (int, float), "comm.latency_startup", 5e-5)),
                bytes_per_second=float(_typed(comm, "bytes_per_second", (int, float), "comm.bytes_per_second", 1.25e8)),
                cpu_bound_fraction=float(
                    _typed(comm, "cpu_bound_fraction", (int, float), "comm.cpu_bound_fraction", 0.1)
                ),
                block_size=cfg.block_size,
            )
        except ValueError as exc:
            raise ConfigError(f"comm: {exc}") from None
        cfg.transition_latency = float(
            _typed(d, "transition_latency", (int, float), "transition_latency", cfg.transition_latency)
        )
        cfg.policy = _typed(d, "policy", str, "policy", cfg.policy)
        cfg.policy_params = dict(_section(d, "policy_params"))
        cfg.doneflag_zero_latency = _typed(d, "doneflag_zero_latency", bool, "doneflag_zero_latency", False)
        cfg.seed = _typed(d, "seed", int, "seed", 0)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def validate(self) -> None:
        if self.p_rows < 1 or self.p_cols < 1:
            raise ConfigError("grid.p_rows and grid.p_cols must be >= 1")
        if self.block_size < 1:
            raise ConfigError("grid.block_size must be >= 1")
        if self.graph_path is None and self.n_blocks < 1:
            raise ConfigError("graph.n_blocks must be >= 1")
        if self.transition_latency < 0:
            raise ConfigError("transition_latency must be >= 0")
        try:
            validate_policy(self.policy)
        except ValueError as exc:
            raise ConfigError(f"policy: {exc}") from None


def _section(d: Mapping, key: str) -> Mapping:
    v = d.get(key, {})
    if not isinstance(v, Mapping):
        raise ConfigError(f"{key}: expected an object")
    return v


def _typed(d: Mapping, key: str, types, name: str, default=None):
    if key not in d:
        if default is None:
            raise ConfigError(f"{name}: required field missing")
        return default
    v = d[key]
    # bool is an int subclass; only accept it where bool is asked for
    if isinstance(v, bool) and types is not bool:
        raise ConfigError(f"{name}: expected a number or string, got {v!r}")
    if not isinstance(v, types):
        raise ConfigError(f"{name}: wrong type {type(v).__name__}")
    return v


# -- resolved setup ------------------------------------------------------


@dataclass
class Setup:
    graph: TaskGraph
    grid: ProcessGrid
    table: GearTable
    power: PowerParams
    cost: KernelCost
    comm: CommModel
    transition_latency: float = DEFAULT_TRANSITION_LATENCY
    policy: str = "orig"
    policy_params: dict = field(default_factory=dict)
    doneflag_zero_latency: bool = False


def resolve(config: SimConfig) -> Setup:
    """Load every object a config refers to; bad names raise ``ConfigError``."""
    config.validate()
    try:
        if config.graph_path:
            graph = TaskGraph.from_json(Path(config.graph_path).read_text())
        else:
            graph = generate_graph(config.kind, config.n_blocks)
        table = load_gear_table(config.gear_table)
        if config.kernel_cycles is not None:
            cost = KernelCost({TaskKind.from_label(k): Fraction(repr(v)) for k, v in config.kernel_cycles.items()})
        else:
            cost = KernelCost.for_factorization(graph.kind, config.block_size)
    except OSError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    comm = config.comm or CommModel(block_size=config.block_size)
    if comm.block_size != config.block_size:
        comm = replace(comm, block_size=config.block_size)
    return Setup(
        graph=graph,
        grid=ProcessGrid(config.p_rows, config.p_cols, config.block_size),
        table=table,
        power=config.power,
        cost=cost,
        comm=comm,
        transition_latency=config.transition_latency,
        policy=config.policy,
        policy_params=dict(config.policy_params),
        doneflag_zero_latency=config.doneflag_zero_latency,
    )


# -- trace ---------------------------------------------------------------

TRACE_COLUMNS = ("process", "t_start", "t_end", "ghz", "volts", "watts", "activity", "task")
SCHEDULE_COLUMNS = ("task", "kind", "row", "col", "process", "start", "finish")


@dataclass
class SimTrace:
    setup: Setup
    segments: list[list[Segment]]
    schedule: dict[TaskRef, ScheduleEntry]
    makespan: Fraction
    data_arrivals: dict[tuple[TaskRef, int], Fraction]  # (task, destination process) -> arrival
    flag_arrivals: dict[tuple[TaskRef, TaskRef], Fraction]  # (sender, dependent) -> delivery

    @property
    def policy(self) -> str:
        return self.setup.policy

    def gears_used(self) -> set[Gear]:
        used = set()
        for lane in self.segments:
            for s in lane:
                used.add(s.gear)
                if s.from_gear is not None:
                    used.add(s.from_gear)
        return used

    def energy(self) -> EnergyReport:
        return replay_energy(self, self.setup.power, self.setup.table)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rank, lane in enumerate(self.segments):
            for s in lane:
                w.writerow([
                    rank, repr(float(s.t_start)), repr(float(s.t_end)), s.gear.frequency, s.gear.voltage,
                    repr(segment_power(self.setup.power, s)), s.activity.value, str(s.task) if s.task else "",
                ])
        return buf.getvalue()

    def schedule_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCHEDULE_COLUMNS)
        for t in sorted(self.schedule, key=lambda t: (self.schedule[t].start, t)):
            e = self.schedule[t]
            w.writerow([str(t), t.kind.label, t.row, t.col, e.process, repr(float(e.start)), repr(float(e.finish))])
        return buf.getvalue()

    def fingerprint(self) -> str:
        """Exact textual form of the whole trace, for byte-level comparison."""
        parts = [f"makespan={self.makespan}"]
        for rank, lane in enumerate(self.segments):
            for s in lane:
                parts.append(
                    f"{rank}|{s.t_start}|{s.t_end}|{s.gear.frequency}|{s.activity.value}|{s.task}|"
                    f"{s.from_gear and s.from_gear.frequency}|{s.cycles}|{s.wait}"
                )
        for t in sorted(self.schedule):
            e = self.schedule[t]
            parts.append(f"{t}|{e.start}|{e.finish}|{e.process}")
        return "\n".join(parts)


# -- engine --------------------------------------------------------------


@dataclass
class _Proc:
    rank: int
    lane: list[TaskRef]
    ctrl: Controller
    gear: Gear
    idx: int = 0
    mode: str = "free"  # free | idle | compute | send | transition
    seg_open: bool = False
    seg_start: Fraction = Fraction(0)
    seg_gear: Gear | None = None
    seg_activity: Activity | None = None
    seg_task: TaskRef | None = None
    seg_from: Gear | None = None
    seg_wait: str | None = None
    task: TaskRef | None = None
    phases: deque = field(default_factory=deque)  # [gear, cycles] still to run for ``task``
    sends: deque = field(default_factory=deque)  # (task, destination, flags to emit after)
    target: Gear | None = None
    token: int = 0
    idle_since_compute: Fraction = Fraction(0)
    done_at: Fraction | None = None
    stat_cursor: int = 0
    segments: list = field(default_factory=list)


class _Engine:
    def __init__(self, setup: Setup, controllers: list[Controller]):
        self.s = setup
        self.graph = setup.graph
        self.table = setup.table
        self.lat = exact(setup.transition_latency)
        self._hz: dict[Gear, Fraction] = {g: exact(g.frequency) * 10**9 for g in self.table.gears}
        comm = setup.comm
        self._startup = exact(comm.latency_startup)
        self._frac = exact(comm.cpu_bound_fraction)
        self._bw = exact(comm.bytes_per_second)
        self._block_bytes = comm.bytes_per_block
        grid = setup.grid
        self.owner = {t: grid.rank(grid.owner(t.row, t.col)) for t in self.graph.tasks}
        lanes = program_order(self.graph, grid)
        self.procs = [_Proc(r, lanes[r], controllers[r], self.table.high) for r in range(grid.size)]
        self.heap: list = []
        self.seq = 0
        self.now = Fraction(0)
        self.start: dict[TaskRef, Fraction] = {}
        self.finish: dict[TaskRef, Fraction] = {}
        self.arrivals: dict[tuple[TaskRef, int], Fraction] = {}
        self.flags: dict[tuple[TaskRef, TaskRef], Fraction] = {}
        self.n_done = 0
        self.interval = None
        intervals = {c.interval for c in controllers if c.interval}
        if intervals:
            if len(intervals) > 1:
                raise SimulationError("controllers disagree on the tick interval")
            self.interval = exact(intervals.pop())
            if self.interval <= 0:
                raise SimulationError("tick interval must be positive")
        self.last_tick = Fraction(0)

    # time helpers
    def hz(self, gear: Gear) -> Fraction:
        return self._hz[gear]

    def msg(self, nbytes: int, gear: Gear) -> Fraction:
        ratio = self.hz(self.table.high) / self.hz(gear)
        return self._startup * (1 + self._frac * (ratio - 1)) + Fraction(nbytes) / self._bw

    def push(self, t: Fraction, payload: tuple) -> None:
        heapq.heappush(self.heap, (t, self.seq, payload))
        self.seq += 1

    # segment bookkeeping
    def _close(self, p: _Proc, cycles: Fraction = Fraction(0)) -> None:
        if not p.seg_open:
            return
        p.seg_open = False
        if p.seg_activity is Activity.IDLE and p.seg_wait == "span":
            p.idle_since_compute += self.now - p.seg_start  # MPI blocking time seen by the next task
        if self.now > p.seg_start:
            p.segments.append(
                Segment(p.seg_start, self.now, p.seg_gear, p.seg_activity, p.seg_task, p.seg_from, cycles, p.seg_wait)
            )

    def _open(self, p: _Proc, activity: Activity, task=None, from_gear=None, wait=None, gear=None) -> None:
        self._close(p)
        p.seg_open = True
        p.seg_start = self.now
        p.seg_gear = gear or p.gear
        p.seg_activity = activity
        p.seg_task = task
        p.seg_from = from_gear
        p.seg_wait = wait

    # process state machine
    def _ready(self, p: _Proc, t: TaskRef) -> bool:
        for u in self.graph.tds_in[t]:
            if u not in self.finish:
                return False
            if self.owner[u] != p.rank and (u, p.rank) not in self.arrivals:
                return False
        if p.ctrl.uses_doneflags and not p.ctrl.ready(t):
            return False
        return True

    def _switch(self, p: _Proc, gear: Gear) -> None:
        if self.lat == 0:
            self._close(p)
            p.gear = gear
            p.mode = "free"
            self._advance(p)
            return
        self._open(p, Activity.TRANSITION, from_gear=p.gear, gear=gear)
        p.mode = "transition"
        p.target = gear
        p.token += 1
        self.push(self.now + self.lat, ("switch", p.rank, p.token))

    def _phases(self, t: TaskRef, d: PolicyDecision) -> deque:
        cycles = self.s.cost.cycles(t)
        if not d.is_split:
            return deque([[d.gear_high, cycles]])
        high = min(cycles, max(Fraction(0), exact(d.duration_high) * self.hz(d.gear_high)))
        out = deque()
        if high > 0:
            out.append([d.gear_high, high])
        if cycles - high > 0:
            out.append([d.gear_low, cycles - high])
        return out

    def _advance(self, p: _Proc) -> None:
        if p.mode in ("compute", "send", "transition"):
            return
        if p.phases:
            g = p.ctrl.governor_gear() if p.ctrl.interrupts_compute else None
            if g is not None and g != p.phases[0][0]:
                p.phases = deque([[g, sum(c for _, c in p.phases)]])
            gear = p.phases[0][0]
            if gear != p.gear:
                return self._switch(p, gear)
            return self._run_phase(p)
        if p.sends:
            gear = p.ctrl.send_gear(p.gear)
            if gear != p.gear:
                return self._switch(p, gear)
            return self._start_send(p)
        if p.idx < len(p.lane):
            t = p.lane[p.idx]
            if self._ready(p, t):
                decision = p.ctrl.compute_plan(t, p.gear, float(p.idle_since_compute))
                p.idle_since_compute = Fraction(0)
                p.task = t
                p.phases = self._phases(t, decision)
                return self._advance(p)
            where = "pre" if p.idx == 0 else "span"
        else:
            where = "post"
            if p.done_at is None:
                p.done_at = self.now
                self.n_done += 1
        gear = p.ctrl.wait_gear(p.gear, where)
        if gear != p.gear:
            return self._switch(p, gear)
        if not (p.mode == "idle" and p.seg_open and p.seg_wait == where and p.seg_gear == p.gear):
            self._open(p, Activity.IDLE, wait=where)
        p.mode = "idle"

    def _run_phase(self, p: _Proc) -> None:
        gear, cycles = p.phases[0]
        self.start.setdefault(p.task, self.now)
        self._open(p, Activity.COMPUTE, task=p.task)
        p.mode = "compute"
        p.token += 1
        self.push(self.now + cycles / self.hz(gear), ("phase", p.rank, p.token))

    def _interrupt(self, p: _Proc) -> None:
        gear, cycles = p.phases[0]
        done = (self.now - p.seg_start) * self.hz(gear)
        if done >= cycles:
            return  # the phase ends at this very instant
        self._close(p, done)
        p.phases[0][1] = cycles - done
        p.token += 1
        p.mode = "free"
        self._advance(p)

    def _finish_task(self, p: _Proc) -> None:
        t = p.task
        self.finish[t] = self.now
        p.task = None
        p.idx += 1
        p.ctrl.after_compute(t, float(self.s.cost.cycles(t) / self.hz(self.table.high)))
        dests = sorted({self.owner[d] for d in self.graph.tds_out[t]} - {p.rank})
        flags = p.ctrl.finish(t) if p.ctrl.uses_doneflags else ()
        for i, q in enumerate(dests):
            p.sends.append((t, q, flags if i == len(dests) - 1 else ()))
        if not dests:
            self._emit_flags(p, flags)
        p.mode = "free"
        self._advance(p)

    def _start_send(self, p: _Proc) -> None:
        t, q, _ = p.sends[0]
        self._open(p, Activity.COMMUNICATE, task=t)
        p.mode = "send"
        p.token += 1
        self.push(self.now + self.msg(self._block_bytes, p.gear), ("send", p.rank, p.token))

    def _emit_flags(self, p: _Proc, flags) -> None:
        for u, t in flags:
            q = self.owner[t]
            if q == p.rank:
                # a local flag is just a memory write, visible before the next scheduling decision
                self.flags[(u, t)] = self.now
                p.ctrl.on_flag(u, t)
                continue
            delay = Fraction(0) if self.s.doneflag_zero_latency else self.msg(0, p.gear)
            self.push(self.now + delay, ("flag", u, t))

    def _wake(self, q: int) -> None:
        p = self.procs[q]
        if p.mode in ("idle", "free"):
            self._advance(p)

    def _stats(self, p: _Proc) -> IntervalStats:
        a, b = self.last_tick, self.now
        st = IntervalStats(float(b - a))
        segs = p.segments
        i = p.stat_cursor
        while i < len(segs) and segs[i].t_end <= a:
            i += 1
        p.stat_cursor = i
        spans = [(s.t_start, s.t_end, s.activity, s.wait) for s in segs[i:]]
        if p.seg_open:
            spans.append((p.seg_start, b, p.seg_activity, p.seg_wait))
        for s0, s1, act, wait in spans:
            dt = float(min(s1, b) - max(s0, a))
            if dt <= 0:
                continue
            if act is Activity.COMPUTE:
                st.compute += dt
            elif act is Activity.COMMUNICATE or (act is Activity.IDLE and wait == "span"):
                st.communicate += dt
            elif act is Activity.IDLE:
                st.idle += dt
        return st

    def _tick(self) -> None:
        for p in self.procs:
            stats = self._stats(p)
            new = p.ctrl.on_tick(p.gear, stats)
            if new == p.gear:
                continue
            if p.mode == "compute" and p.ctrl.interrupts_compute:
                self._interrupt(p)
            elif p.mode == "idle":
                self._advance(p)
        self.last_tick = self.now
        self.push(self.now + self.interval, ("tick",))

    def run(self) -> SimTrace:
        for p in self.procs:
            self._advance(p)
        if self.interval:
            self.push(self.interval, ("tick",))
        while self.n_done < len(self.procs):
            if not self.heap:
                stuck = [str(p.lane[p.idx]) for p in self.procs if p.idx < len(p.lane)]
                raise SimulationError(f"deadlock: no events left, waiting tasks {stuck}")
            t, _, ev = heapq.heappop(self.heap)
            self.now = t
            kind = ev[0]
            if kind == "tick":
                self._tick()
                continue
            if kind == "data":
                _, u, q = ev
                self.arrivals[(u, q)] = self.now
                self._wake(q)
                continue
            if kind == "flag":
                _, u, dst = ev
                self.flags[(u, dst)] = self.now
                q = self.owner[dst]
                self.procs[q].ctrl.on_flag(u, dst)
                self._wake(q)
                continue
            p = self.procs[ev[1]]
            if ev[2] != p.token:
                continue  # superseded by an interrupt
            if kind == "switch":
                self._close(p)
                p.gear = p.target
                p.mode = "free"
                self._advance(p)
            elif kind == "phase":
                _, cycles = p.phases.popleft()
                self._close(p, cycles)
                p.mode = "free"
                if p.phases:
                    self._advance(p)
                else:
                    self._finish_task(p)
            elif kind == "send":
                u, q, flags = p.sends.popleft()
                self._close(p)
                self.push(self.now, ("data", u, q))
                self._emit_flags(p, flags)
                p.mode = "free"
                self._advance(p)
        makespan = max(p.done_at for p in self.procs)
        self.now = makespan
        for p in self.procs:
            self._close(p)
        schedule = {t: ScheduleEntry(self.start[t], self.finish[t], self.owner[t]) for t in self.graph.tasks}
        return SimTrace(self.s, [p.segments for p in self.procs], schedule, makespan, self.arrivals, self.flags)


# -- cp-theo planning ----------------------------------------------------


def plan_cp_theo(setup: Setup) -> dict[TaskRef, PolicyDecision]:
    """Gear plan of the idealized CP policy from exact slack.

    Builds the process timeline graph the engine executes under ``cp-theo``
    (computes and sends at f_h, sends in destination order), then visits the
    tasks that may be slowed (off the critical path, no dependents) in
    topological order.  Each one takes as much of its current total slack as
    its gears can fill, minus the switch latencies, and the slack of the
    remaining tasks is recomputed before the next one is visited.
    """
    graph, grid, table, cost = setup.graph, setup.grid, setup.table, setup.cost
    lat = exact(setup.transition_latency)
    hz = {g: exact(g.frequency) * 10**9 for g in table.gears}
    comm = setup.comm
    send_time = exact(comm.latency_startup) + Fraction(comm.bytes_per_block) / exact(comm.bytes_per_second)
    owner = {t: grid.rank(grid.owner(t.row, t.col)) for t in graph.tasks}

    preds: dict[tuple, list[tuple]] = {}
    durations: dict[tuple, Fraction] = {}
    for lane in program_order(graph, grid):
        prev = None
        for t in lane:
            c = (t, 0, -1)
            preds[c] = [prev] if prev else []
            for u in sorted(graph.tds_in[t]):
                if owner[u] != owner[t]:
                    preds[c].append((u, 1, owner[t]))
            durations[c] = cost.cycles(t) / hz[table.high]
            prev = c
            for q in sorted({owner[d] for d in graph.tds_out[t]} - {owner[t]}):
                s = (t, 1, q)
                preds[s] = [prev]
                durations[s] = send_time
                prev = s
    order = _toposort(preds)

    crit = set(generate_crit_path(graph))
    plan: dict[TaskRef, PolicyDecision] = {}
    timing = critical_path_method(order, preds, durations)
    for t in graph.topological_order():
        if t in crit or graph.tds_out[t]:
            continue
        node = (t, 0, -1)
        slack = timing.slack(node)
        if slack <= 3 * lat:
            continue
        d = cp_decide(t, crit, float(slack - 3 * lat), table, cost)
        if d.gear_high == table.high and not d.is_split:
            continue
        realized = _realized(t, d, cost, hz, lat)
        if realized - durations[node] > slack:
            continue
        durations[node] = realized
        plan[t] = d
        timing = critical_path_method(order, preds, durations)
    return plan


def _realized(t: TaskRef, d: PolicyDecision, cost: KernelCost, hz: dict, lat: Fraction) -> Fraction:
    """Wall time the engine will spend on a planned task, switches included."""
    cycles = cost.cycles(t)
    if not d.is_split:
        return cycles / hz[d.gear_high] + 2 * lat
    high = min(cycles, max(Fraction(0), exact(d.duration_high) * hz[d.gear_high]))
    return high / hz[d.gear_high] + (cycles - high) / hz[d.gear_low] + 3 * lat


def _toposort(preds: Mapping[tuple, list[tuple]]) -> list[tuple]:
    succs: dict = {v: [] for v in preds}
    indeg = {v: len(ps) for v, ps in preds.items()}
    for v, ps in preds.items():
        for u in ps:
            succs[u].append(v)
    ready = [v for v, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        v = heapq.heappop(ready)
        out.append(v)
        for w in succs[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    if len(out) != len(preds):
        raise SimulationError("process timeline has a cycle")
    return out


# -- entry points --------------------------------------------------------


def make_controllers(setup: Setup) -> list[Controller]:
    table, params = setup.table, setup.policy_params
    n = setup.grid.size
    name = validate_policy(setup.policy)
    if name == "orig":
        return [OrigController(table, params) for _ in range(n)]
    if name == "sc-lib":
        return [ScLibController(table, params) for _ in range(n)]
    if name == "fermata":
        return [FermataController(table, params) for _ in range(n)]
    if name == "cpuspeed":
        return [CpuSpeedController(table, params) for _ in range(n)]
    if name == "cp":
        reserve = 3 * setup.transition_latency
        return [AdagioController(table, params, setup.cost, reserve) for _ in range(n)]
    if name == "cp-theo":
        plan = plan_cp_theo(setup)
        return [CpTheoController(table, params, plan) for _ in range(n)]
    lanes = program_order(setup.graph, setup.grid)
    return [TxController(table, params, TxState.for_tasks(setup.graph, table, lanes[r])) for r in range(n)]


def run(setup: Setup) -> SimTrace:
    return _Engine(setup, make_controllers(setup)).run()


def simulate(config: SimConfig) -> SimTrace:
    """Execute the configured graph under the configured policy."""
    return run(resolve(config))
