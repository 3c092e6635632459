"""CMOS node power model, race-to-halt vs. stretch energy, and gear tables."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence


class PowerModelError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Gear:
    """One DVFS operating point (GHz, volts)."""

    frequency: float
    voltage: float

    def __post_init__(self):
        if not (self.frequency > 0 and self.voltage > 0):
            raise PowerModelError(f"gear values must be positive: {self}")


@dataclass(frozen=True)
class GearTable:
    name: str
    gears: tuple[Gear, ...]

    def __post_init__(self):
        object.__setattr__(self, "gears", tuple(self.gears))
        if not self.gears:
            raise PowerModelError(f"gear table {self.name!r} is empty")
        for hi, lo in zip(self.gears, self.gears[1:]):
            if not hi.frequency > lo.frequency:
                raise PowerModelError(f"{self.name}: frequencies must strictly decrease")
            if hi.voltage < lo.voltage:
                raise PowerModelError(f"{self.name}: voltages must not increase as frequency drops")

    @property
    def high(self) -> Gear:
        return self.gears[0]

    @property
    def low(self) -> Gear:
        return self.gears[-1]

    @property
    def f_h(self) -> float:
        return self.gears[0].frequency

    @property
    def f_l(self) -> float:
        return self.gears[-1].frequency

    @property
    def max_ratio(self) -> float:
        """Upper bound f_h / f_l of the slack ratio."""
        return self.f_h / self.f_l

    def gear_at(self, frequency: float) -> Gear | None:
        for g in self.gears:
            if g.frequency == frequency:
                return g
        return None

    def index(self, gear: Gear) -> int:
        return self.gears.index(gear)

    def neighbors(self, frequency: float) -> tuple[Gear, Gear]:
        """Available gears ``(ceil, floor)`` bracketing ``frequency``."""
        if not self.f_l <= frequency <= self.f_h:
            raise PowerModelError(f"{frequency} GHz outside [{self.f_l}, {self.f_h}]")
        ascending = [g.frequency for g in reversed(self.gears)]
        pos = bisect.bisect_left(ascending, frequency)
        ceil = self.gears[len(self.gears) - 1 - pos]
        if ceil.frequency == frequency:
            return ceil, ceil
        return ceil, self.gears[len(self.gears) - pos]

    def floor_gear(self, frequency: float) -> Gear:
        """Highest gear at or below ``frequency``; the lowest gear if none is."""
        for g in self.gears:
            if g.frequency <= frequency:
                return g
        return self.low

    def to_dict(self) -> dict:
        return {"name": self.name, "gears": [{"ghz": g.frequency, "volts": g.voltage} for g in self.gears]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GearTable":
        try:
            gears = [Gear(float(g["ghz"]), float(g["volts"])) for g in d["gears"]]
            return cls(str(d["name"]), tuple(sorted(gears, reverse=True)))
        except (KeyError, TypeError) as exc:
            raise PowerModelError(f"malformed gear table: {exc}") from None


def _table(name: str, pairs: Sequence[tuple[float, float]]) -> GearTable:
    return GearTable(name, tuple(Gear(f, v) for f, v in pairs))


# Frequency (GHz) / voltage (V) operating points of five processors.
GEAR_TABLES: dict[str, GearTable] = {
    "opteron-2380": _table("AMD Opteron 2380", [(2.5, 1.300), (1.8, 1.200), (1.3, 1.100), (0.8, 1.025)]),
    "opteron-846": _table(
        "AMD Opteron 846 and AMD Athlon64 3200+", [(2.0, 1.500), (1.8, 1.400), (1.6, 1.300), (0.8, 0.900)]
    ),
    "opteron-2218": _table("AMD Opteron 2218", [(2.4, 1.250), (2.2, 1.200), (1.8, 1.150), (1.0, 1.100)]),
    "pentium-m": _table("Intel Pentium M", [(1.4, 1.484), (1.2, 1.436), (1.0, 1.308), (0.8, 1.180)]),
    "core-i7-2760qm": _table("Intel Core i7-2760QM", [(2.4, 1.060), (2.0, 0.970), (1.6, 0.890), (0.8, 0.760)]),
}
DEFAULT_GEAR_TABLE = "opteron-2380"


def get_gear_table(name: str) -> GearTable:
    try:
        return GEAR_TABLES[name]
    except KeyError:
        raise PowerModelError(f"unknown gear table {name!r}; known: {', '.join(GEAR_TABLES)}") from None


def load_gear_table(source: str | Path) -> GearTable:
    """Built-in table by key, or a JSON file ``{name, gears: [{ghz, volts}]}``."""
    if str(source) in GEAR_TABLES:
        return GEAR_TABLES[str(source)]
    path = Path(source)
    if not path.exists():
        raise PowerModelError(f"unknown gear table {str(source)!r}; known: {', '.join(GEAR_TABLES)}")
    return GearTable.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class PowerParams:
    """Node power coefficients.

    Attributes:
        ac: switched capacitance times activity, W per (GHz * V^2).
        i_sub: CPU subthreshold leakage current in amperes, voltage independent.
        p_const: leakage power of everything besides the CPU, in watts.
    """

    ac: float
    i_sub: float
    p_const: float

    def __post_init__(self):
        if min(self.ac, self.i_sub, self.p_const) < 0:
            raise PowerModelError(f"power coefficients must be nonnegative: {self}")


def calibrate_params(table: GearTable, p_high: float, p_low: float, i_sub: float) -> PowerParams:
    """Solve for ``ac`` and ``p_const`` so the node draws ``p_high`` at f_h and ``p_low`` at f_l."""
    hi, lo = table.high, table.low
    dyn = hi.frequency * hi.voltage**2 - lo.frequency * lo.voltage**2
    ac = (p_high - p_low - i_sub * (hi.voltage - lo.voltage)) / dyn
    p_const = p_high - ac * hi.frequency * hi.voltage**2 - i_sub * hi.voltage
    return PowerParams(ac, i_sub, p_const)


# Not measured values: chosen so one node draws ~950/16 W at f_h and
# ~700/16 W at f_l on the default table, which is enough for plausible demos.
DEFAULT_POWER_PARAMS = calibrate_params(GEAR_TABLES[DEFAULT_GEAR_TABLE], 950 / 16, 700 / 16, i_sub=5.0)


def node_power(params: PowerParams, gear: Gear) -> float:
    """Total node power ``ac*f*V^2 + i_sub*V + p_const`` in watts."""
    f, v = gear.frequency, gear.voltage
    return params.ac * f * v * v + params.i_sub * v + params.p_const


def _check_ratio(n: float) -> None:
    if n < 1:
        raise PowerModelError(f"slack ratio must be >= 1, got {n}")


def energy_race_to_halt(params: PowerParams, table: GearTable, T: float, n: float) -> float:
    """Run at f_h for ``T`` then sit at f_l for the remaining ``(n - 1) * T``."""
    _check_ratio(n)
    return node_power(params, table.high) * T + node_power(params, table.low) * (n - 1) * T


def energy_cp_stretch(params: PowerParams, table: GearTable, T: float, n: float, v_m: float) -> float:
    """Run at ``f_h / n`` with supply ``v_m`` for the whole ``n * T`` span."""
    _check_ratio(n)
    f_m = table.f_h / n
    return (params.ac * f_m * v_m * v_m + params.i_sub * v_m + params.p_const) * n * T


def stretch_voltage(table: GearTable, n: float) -> float:
    """Voltage used to stretch a task by ``n``: that of the nearest gear at or below f_h / n."""
    _check_ratio(n)
    return table.floor_gear(table.f_h / n).voltage


def energy_ratio(params: PowerParams, table: GearTable, n: float, v_m: float | None = None) -> float:
    """Stretch energy over race-to-halt energy for one task; ``T`` cancels."""
    if v_m is None:
        v_m = stretch_voltage(table, n)
    denom = energy_race_to_halt(params, table, 1.0, n)
    if denom == 0:
        raise PowerModelError("race-to-halt energy is zero; ratio undefined")
    return energy_cp_stretch(params, table, 1.0, n, v_m) / denom


def energy_coefficients(fn, table: GearTable, *args) -> tuple[float, float, float]:
    """Coefficients of (ac, i_sub, p_const) in a linear energy function.

    Evaluates ``fn(params, table, *args)`` at the three unit parameter vectors.
    """
    basis = (PowerParams(1, 0, 0), PowerParams(0, 1, 0), PowerParams(0, 0, 1))
    return tuple(fn(p, table, *args) for p in basis)  # type: ignore[return-value]


def ideal_frequency(table: GearTable, T: float, slack: float) -> float:
    """Frequency that stretches a ``T``-long task (at f_h) exactly over ``T + slack``."""
    if T <= 0:
        raise PowerModelError("task time must be positive")
    if slack < 0:
        raise PowerModelError("slack must be nonnegative")
    return table.f_h * T / (T + slack)


def split_schedule(table: GearTable, f_opt: float, work: float) -> tuple[float, float]:
    """Durations ``(x, y)`` at the gears just above and below ``f_opt``.

    ``x * ceil + y * floor == work`` and ``x + y == work / f_opt``: the same
    cycles finish in the same time as a hypothetical ``f_opt`` gear.
    """
    ceil, floor = table.neighbors(f_opt)
    total = work / f_opt
    if ceil is floor:
        return total, 0.0
    fc, ff = ceil.frequency, floor.frequency
    x = work * (f_opt - ff) / (f_opt * (fc - ff))
    y = work * (fc - f_opt) / (f_opt * (fc - ff))
    return x, y
