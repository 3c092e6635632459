"""DVFS scheduling policies as per-process decision objects.

Library-level policies (``sc-lib``, ``cp-theo``, ``tx``) decide from static
knowledge of the task graph.  OS-level policies (``fermata``, ``cpuspeed``,
``cp``) only see what an interval governor could observe and rely on
history-based workload prediction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping

from .costmodel import KernelCost, task_duration
from .dag import TaskGraph, TaskRef
from .power import Gear, GearTable, ideal_frequency, split_schedule

POLICY_NAMES = ("orig", "sc-lib", "fermata", "cpuspeed", "cp", "cp-theo", "tx")

DEFAULT_POLICY_PARAMS = {
    "interval": 0.01,  # seconds between OS governor ticks
    "lam": 0.5,  # RELAX relaxation factor
    "util_threshold": 0.7,  # CPUSpeed steps down below this predicted utilization
    "comm_threshold": 0.5,  # Fermata predicts a communication phase above this fraction
    "busy_poll": True,  # MPI waits spin, so they count as CPU utilization
}


class PolicyError(ValueError):
    pass


class TxProtocolError(RuntimeError):
    """A DoneFlag arrived that the receiving task was not waiting for."""


@dataclass(frozen=True)
class PolicyDecision:
    """Gear for one task: a single gear, or a split starting at ``gear_high``.

    For a split, ``duration_high`` seconds run at ``gear_high`` and the rest
    of the task's cycles at ``gear_low``.
    """

    gear_high: Gear
    gear_low: Gear | None = None
    duration_high: float | None = None

    @property
    def is_split(self) -> bool:
        return self.gear_low is not None


# -- workload predictors -------------------------------------------------


@dataclass
class PredictorState:
    last_observed: float | None = None
    last_predicted: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise PolicyError("relaxation factor must lie in [0, 1]")


def past_predict(state: PredictorState, observed: float) -> float:
    """PAST: the next interval repeats the one just observed."""
    state.last_observed = observed
    state.last_predicted = observed
    return observed


def relax_predict(state: PredictorState, observed: float) -> float:
    """RELAX: blend the previous prediction with the new observation."""
    pred = (1 - state.lam) * state.last_predicted + state.lam * observed
    state.last_observed = observed
    state.last_predicted = pred
    return pred


# -- decision functions --------------------------------------------------


def cp_decide(
    task: TaskRef,
    crit_path: Collection[TaskRef],
    slack: float,
    table: GearTable,
    cost: KernelCost,
    tds_out: Collection[TaskRef] = (),
) -> PolicyDecision:
    """Critical-path DVFS for one task.

    Tasks on the critical path, or with dependents, run at f_h.  Others are
    slowed to the frequency that exactly fills their slack, approximated
    with the two neighbouring gears when it is not available, and clamped
    to f_l when the slack is larger than f_l can fill.
    """
    if task in crit_path or tds_out or slack <= 0:
        return PolicyDecision(table.high)
    T = task_duration(cost, task, table.f_h)
    f_opt = ideal_frequency(table, T, slack)
    if f_opt < table.f_l:
        return PolicyDecision(table.low)
    exact = table.gear_at(f_opt)
    if exact is not None:
        return PolicyDecision(exact)
    ceil, floor = table.neighbors(f_opt)
    x, _ = split_schedule(table, f_opt, T * table.f_h)
    return PolicyDecision(ceil, floor, x)


class Phase(str, enum.Enum):
    COMPUTE = "compute"
    COMMUNICATE = "communicate"
    IDLE = "idle"


class ScLevel(str, enum.Enum):
    LIBRARY = "library"
    OS_PREDICTED = "os-predicted"


def sc_decide(table: GearTable, phase: Phase, level: ScLevel, in_mpi_span: bool = False) -> Gear | None:
    """Scheduled-communication gear; ``None`` leaves the gear unchanged.

    The library knows when it is blocked inside an MPI call, so an idle
    wait inside a span of MPI activity is treated as communication there.
    """
    if phase is Phase.COMPUTE:
        return table.high
    if phase is Phase.COMMUNICATE:
        return table.low
    if level is ScLevel.LIBRARY and in_mpi_span:
        return table.low
    return None


# -- TX protocol ---------------------------------------------------------


class TxEventKind(str, enum.Enum):
    DEP_DONE_FLAG = "dep-done-flag"
    TASK_READY = "task-ready"
    TASK_FINISHED = "task-finished"


@dataclass(frozen=True)
class TxEvent:
    kind: TxEventKind
    task: TaskRef
    src: TaskRef | None = None  # sender of a DoneFlag


@dataclass
class TxState:
    """TX bookkeeping of one process."""

    table: GearTable
    tds_out: Mapping[TaskRef, frozenset[TaskRef]]
    pending_in: dict[TaskRef, set[TaskRef]]
    done_flags_sent: set[tuple[TaskRef, TaskRef]] = field(default_factory=set)
    current_gear: Gear | None = None

    @classmethod
    def for_tasks(cls, graph: TaskGraph, table: GearTable, tasks: Iterable[TaskRef]) -> "TxState":
        return cls(table, graph.tds_out, {t: set(graph.tds_in[t]) for t in tasks}, current_gear=table.high)

    def ready(self, task: TaskRef) -> bool:
        return not self.pending_in[task]


@dataclass(frozen=True)
class TxOutput:
    gear: Gear | None
    flags: tuple[tuple[TaskRef, TaskRef], ...] = ()


def tx_step(state: TxState, event: TxEvent) -> TxOutput:
    """Advance the race-to-halt protocol by one event.

    A task waiting on DoneFlags halts at f_l; once its last flag is in it
    races at f_h; when it finishes it flags every dependent and halts again.
    """
    table = state.table
    task = event.task
    if task not in state.pending_in:
        raise TxProtocolError(f"{task} is not owned by this process")
    if event.kind is TxEventKind.DEP_DONE_FLAG:
        pending = state.pending_in[task]
        if event.src not in pending:
            raise TxProtocolError(f"unexpected DoneFlag {event.src} -> {task}")
        pending.discard(event.src)
        return TxOutput(None)
    if event.kind is TxEventKind.TASK_READY:
        state.current_gear = table.low if state.pending_in[task] else table.high
        return TxOutput(state.current_gear)
    if state.pending_in[task]:
        raise TxProtocolError(f"{task} finished before its dependencies")
    flags = tuple((task, t) for t in sorted(state.tds_out[task]))
    state.done_flags_sent.update(flags)
    state.current_gear = table.low
    return TxOutput(table.low, flags)


# -- per-process controllers used by the simulator -----------------------


@dataclass
class IntervalStats:
    """Time a process spent in each activity class over one governor interval."""

    length: float
    compute: float = 0.0
    communicate: float = 0.0  # sends and waits inside an MPI span
    idle: float = 0.0  # waits before the first or after the last task


class Controller:
    """Per-process policy hooks; the base class never changes gear."""

    name = "orig"
    interval: float | None = None
    interrupts_compute = False
    uses_doneflags = False

    def __init__(self, table: GearTable, params: Mapping | None = None):
        self.table = table
        self.params = {**DEFAULT_POLICY_PARAMS, **(params or {})}

    def compute_plan(self, task: TaskRef, current: Gear, idle_before: float) -> PolicyDecision:
        return PolicyDecision(self.table.high)

    def after_compute(self, task: TaskRef, seconds_at_fh: float) -> None:
        pass

    def send_gear(self, current: Gear) -> Gear:
        return current

    def wait_gear(self, current: Gear, where: str) -> Gear:
        """Gear while blocked; ``where`` is "pre", "span" or "post"."""
        return current

    def on_tick(self, current: Gear, stats: IntervalStats) -> Gear:
        return current

    def governor_gear(self) -> Gear | None:
        """Gear an interval governor currently imposes on computation, if any."""
        return None


class OrigController(Controller):
    pass


class ScLibController(Controller):
    name = "sc-lib"

    def send_gear(self, current):
        return sc_decide(self.table, Phase.COMMUNICATE, ScLevel.LIBRARY)

    def wait_gear(self, current, where):
        gear = sc_decide(self.table, Phase.IDLE, ScLevel.LIBRARY, in_mpi_span=where == "span")
        return current if gear is None else gear


class FermataController(Controller):
    """OS-level scheduled communication driven by PAST phase prediction."""

    name = "fermata"
    interrupts_compute = True

    def __init__(self, table, params=None):
        super().__init__(table, params)
        self.interval = float(self.params["interval"])
        self.governor = table.high
        self._comm = PredictorState()
        self._idle = PredictorState()

    def compute_plan(self, task, current, idle_before):
        return PolicyDecision(self.governor)

    def governor_gear(self):
        return self.governor

    def send_gear(self, current):
        return self.governor

    def wait_gear(self, current, where):
        return self.governor

    def on_tick(self, current, stats):
        comm = past_predict(self._comm, stats.communicate / stats.length)
        idle = past_predict(self._idle, stats.idle / stats.length)
        if idle > 0.5:
            phase = Phase.IDLE
        elif comm >= float(self.params["comm_threshold"]):
            phase = Phase.COMMUNICATE
        else:
            phase = Phase.COMPUTE
        gear = sc_decide(self.table, phase, ScLevel.OS_PREDICTED)
        if gear is not None:
            self.governor = gear
        return self.governor


class CpuSpeedController(Controller):
    """Utilization governor with RELAX prediction, one gear step per tick."""

    name = "cpuspeed"
    interrupts_compute = True

    def __init__(self, table, params=None):
        super().__init__(table, params)
        self.interval = float(self.params["interval"])
        self.governor = table.high
        self._util = PredictorState(last_predicted=1.0, lam=float(self.params["lam"]))

    def compute_plan(self, task, current, idle_before):
        return PolicyDecision(self.governor)

    def governor_gear(self):
        return self.governor

    def send_gear(self, current):
        return self.governor

    def wait_gear(self, current, where):
        return self.governor

    def on_tick(self, current, stats):
        busy = stats.compute + stats.communicate
        if self.params["busy_poll"]:
            busy += stats.idle
        predicted = relax_predict(self._util, busy / stats.length)
        i = self.table.index(self.governor)
        if predicted < float(self.params["util_threshold"]):
            i = min(i + 1, len(self.table.gears) - 1)
        else:
            i = max(i - 1, 0)
        self.governor = self.table.gears[i]
        return self.governor


class AdagioController(FermataController):
    """OS-level critical-path slack reclamation on top of Fermata.

    The slack of a task is predicted with PAST from the MPI blocking time
    that followed the previous task of the same kind, and its length from
    that task's measured length; the first instance of each kind runs at
    f_h while history is gathered.
    """

    name = "cp"
    interrupts_compute = False

    def __init__(self, table, params=None, cost: KernelCost | None = None, reserve: float = 0.0):
        super().__init__(table, params)
        self.cost = cost
        self.reserve = reserve
        self._slack: dict = {}
        self._length: dict = {}
        self._prev_kind = None

    def compute_plan(self, task, current, idle_before):
        if self._prev_kind is not None:
            past_predict(self._slack.setdefault(self._prev_kind, PredictorState()), idle_before)
        self._prev_kind = task.kind
        slack_state = self._slack.get(task.kind)
        length_state = self._length.get(task.kind)
        if slack_state is None or length_state is None:
            return PolicyDecision(self.table.high)
        slack = slack_state.last_predicted - self.reserve
        T = length_state.last_predicted
        if slack <= 0 or T <= 0:
            return PolicyDecision(self.table.high)
        f_opt = ideal_frequency(self.table, T, slack)
        if f_opt < self.table.f_l:
            return PolicyDecision(self.table.low)
        exact = self.table.gear_at(f_opt)
        if exact is not None:
            return PolicyDecision(exact)
        ceil, floor = self.table.neighbors(f_opt)
        x, _ = split_schedule(self.table, f_opt, T * self.table.f_h)
        return PolicyDecision(ceil, floor, x)

    def after_compute(self, task, seconds_at_fh):
        past_predict(self._length.setdefault(task.kind, PredictorState()), seconds_at_fh)


class CpTheoController(Controller):
    """Library-level CP with an exact slack oracle (precomputed plan).

    Only computation is slowed; sends and waits stay at f_h so the planned
    slack is not eaten by communication running slower than under ``orig``.
    """

    name = "cp-theo"

    def __init__(self, table, params=None, plan: Mapping[TaskRef, PolicyDecision] | None = None):
        super().__init__(table, params)
        self.plan = plan or {}

    def compute_plan(self, task, current, idle_before):
        return self.plan.get(task, PolicyDecision(self.table.high))

    def send_gear(self, current):
        return self.table.high

    def wait_gear(self, current, where):
        return self.table.high


class TxController(ScLibController):
    """Race-to-halt driven by DoneFlags; scheduled communication included."""

    name = "tx"
    uses_doneflags = True

    def __init__(self, table, params=None, state: TxState | None = None):
        super().__init__(table, params)
        if state is None:
            raise PolicyError("tx controller needs a TxState")
        self.state = state

    def ready(self, task: TaskRef) -> bool:
        return self.state.ready(task)

    def on_flag(self, src: TaskRef, dst: TaskRef) -> None:
        tx_step(self.state, TxEvent(TxEventKind.DEP_DONE_FLAG, dst, src))

    def compute_plan(self, task, current, idle_before):
        out = tx_step(self.state, TxEvent(TxEventKind.TASK_READY, task))
        if out.gear != self.table.high:
            raise TxProtocolError(f"{task} started with DoneFlags outstanding")
        return PolicyDecision(out.gear)

    def finish(self, task: TaskRef) -> tuple[tuple[TaskRef, TaskRef], ...]:
        return tx_step(self.state, TxEvent(TxEventKind.TASK_FINISHED, task)).flags

    def wait_gear(self, current, where):
        return self.table.low


def validate_policy(name: str) -> str:
    if name not in POLICY_NAMES:
        raise PolicyError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
    return name
