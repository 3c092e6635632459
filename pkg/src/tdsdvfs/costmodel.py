"""Task and message durations as a function of CPU frequency."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

from .dag import TaskKind, TaskRef
from .power import GearTable

DEFAULT_TRANSITION_LATENCY = 1e-4  # seconds per gear switch; uncalibrated


class CostModelError(ValueError):
    pass


# Dense-kernel flop counts per b x b block, in units of b^3.
_FLOPS_PER_B3 = {
    "cholesky": {
        TaskKind.FACTORIZE: Fraction(1, 3),
        TaskKind.SOLVE: Fraction(1),
        TaskKind.UPDATE1: Fraction(2),
        TaskKind.UPDATE2: Fraction(1),
    },
    "lu": {
        TaskKind.FACTORIZE: Fraction(2, 3),
        TaskKind.SOLVE: Fraction(1),
        TaskKind.UPDATE1: Fraction(2),
        TaskKind.UPDATE2: Fraction(2),
    },
    "qr": {
        TaskKind.FACTORIZE: Fraction(2),
        TaskKind.SOLVE: Fraction(1),
        TaskKind.UPDATE1: Fraction(2),
        TaskKind.UPDATE2: Fraction(2),
    },
}


@dataclass(frozen=True)
class KernelCost:
    """Cycle count of each task kind for one block.

    Tasks are modeled as purely compute bound (one flop per cycle), so
    duration scales exactly as ``1 / f``.  Counts are kept as exact
    rationals so simulated cycle bookkeeping never drifts.
    """

    cycles_per_block: Mapping[TaskKind, Fraction]
    memory_fraction: float = 0.0  # reserved; only the compute-bound model is implemented

    def __post_init__(self):
        cycles = {TaskKind(k): Fraction(v) for k, v in self.cycles_per_block.items()}
        if any(c <= 0 for c in cycles.values()):
            raise CostModelError("cycle counts must be positive")
        object.__setattr__(self, "cycles_per_block", cycles)
        if self.memory_fraction != 0.0:
            raise CostModelError("memory-bound cost model is not implemented")

    @classmethod
    def for_factorization(cls, kind: str, block_size: int) -> "KernelCost":
        try:
            table = _FLOPS_PER_B3[kind.lower()]
        except KeyError:
            raise CostModelError(f"no kernel costs for {kind!r}") from None
        b3 = block_size**3
        return cls({k: v * b3 for k, v in table.items()})

    def cycles(self, task: TaskRef) -> Fraction:
        try:
            return self.cycles_per_block[task.kind]
        except KeyError:
            raise CostModelError(f"no cycle count for task kind {task.kind!r}") from None


def task_duration(cost: KernelCost, task: TaskRef, f: float) -> float:
    """Seconds to run ``task`` at ``f`` GHz."""
    return float(cost.cycles(task)) / (f * 1e9)


@dataclass(frozen=True)
class CommModel:
    """Point-to-point message cost.

    Only the link start-up is CPU bound, and only ``cpu_bound_fraction`` of
    it; the payload transfer is not affected by the sender's frequency.
    """

    latency_startup: float = 5e-5
    bytes_per_second: float = 1.25e8
    cpu_bound_fraction: float = 0.1
    block_size: int = 256

    def __post_init__(self):
        if not 0 <= self.cpu_bound_fraction <= 1:
            raise CostModelError("cpu_bound_fraction must lie in [0, 1]")
        if self.latency_startup < 0 or self.bytes_per_second <= 0:
            raise CostModelError("latency must be >= 0 and bandwidth > 0")

    @property
    def bytes_per_block(self) -> int:
        return 8 * self.block_size**2


def message_duration(comm: CommModel, nbytes: float, f: float, table: GearTable) -> float:
    """Seconds to send ``nbytes`` while the sender runs at ``f`` GHz."""
    if nbytes < 0:
        raise CostModelError("message size must be nonnegative")
    startup = comm.latency_startup * (1 + comm.cpu_bound_fraction * (table.f_h / f - 1))
    return startup + nbytes / comm.bytes_per_second
