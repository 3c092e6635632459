"""Command-line entry point: generate graphs, simulate, compare policies, inspect the power model."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dag import FACTORIZATIONS, DagError, generate_graph
from .policies import POLICY_NAMES
from .power import (
    GEAR_TABLES,
    PowerModelError,
    PowerParams,
    energy_coefficients,
    energy_cp_stretch,
    energy_race_to_halt,
    energy_ratio,
    get_gear_table,
    stretch_voltage,
)
from .report import ReportError, compare, metrics, report_csv, report_json, single_row
from .sim import ConfigError, SimConfig, resolve, run

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class ExperimentSpec:
    config: SimConfig
    policies: list[str]
    baseline: str = "orig"
    out_dir: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        if not isinstance(d, Mapping):
            raise ConfigError("experiment must be a JSON object")
        d = dict(d)
        policies = d.pop("policies", None)
        baseline = d.pop("baseline", "orig")
        out_dir = d.pop("out_dir", None)
        if not isinstance(policies, list) or not all(isinstance(p, str) for p in policies):
            raise ConfigError("policies: expected a list of policy names")
        if len(policies) < 2:
            raise ConfigError("policies: a comparison needs at least 2 policies")
        for p in policies:
            if p not in POLICY_NAMES:
                raise ConfigError(f"policies: unknown policy {p!r}")
        if len(set(policies)) != len(policies):
            raise ConfigError("policies: duplicate entries")
        if baseline not in policies:
            raise ConfigError(f"baseline: {baseline!r} is not in policies")
        d.setdefault("policy", baseline)
        return cls(SimConfig.from_dict(d), policies, baseline, out_dir)


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def _say(args, *lines: str) -> None:
    if not args.quiet:
        for line in lines:
            print(line)


def cmd_generate(args) -> int:
    graph = generate_graph(args.kind, args.n_blocks)
    out = Path(args.out or ".")
    stem = f"{args.kind}_{args.n_blocks}"
    j = _write(out / f"{stem}.json", graph.to_json())
    d = _write(out / f"{stem}.dot", graph.to_dot())
    _say(args, f"{len(graph.tasks)} tasks, {len(graph.edges)} edges", str(j), str(d))
    return EXIT_OK


def _config_from(args) -> SimConfig:
    path = args.config_file or args.config
    cfg = SimConfig.from_dict(_read_json(path)) if path else SimConfig()
    if getattr(args, "policy", None):
        if args.policy not in POLICY_NAMES:
            raise ConfigError(f"policy: unknown policy {args.policy!r}")
        cfg.policy = args.policy
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_simulate(args) -> int:
    setup = resolve(_config_from(args))
    trace = run(setup)
    rep = metrics(trace, setup.power, setup.table, setup.cost)
    out = Path(args.out or ".")
    files = [
        _write(out / "trace.csv", trace.trace_csv()),
        _write(out / "schedule.csv", trace.schedule_csv()),
        _write(out / "report.json", report_json(single_row(setup.policy, rep)) + "\n"),
    ]
    _say(
        args,
        f"{setup.policy}: makespan {rep.makespan:.6g} s, energy {rep.total_energy:.6g} J, "
        f"{rep.mflops_per_watt:.6g} MFLOPS/W",
        *map(str, files),
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    path = args.config_file or args.config
    if not path:
        raise ConfigError("compare needs an experiment file")
    spec = ExperimentSpec.from_dict(_read_json(path))
    if args.seed is not None:
        spec.config.seed = args.seed
    reports = []
    for policy in spec.policies:
        spec.config.policy = policy
        setup = resolve(spec.config)
        reports.append((policy, metrics(run(setup), setup.power, setup.table, setup.cost)))
    rows = compare(reports, spec.baseline)
    out = Path(args.out or spec.out_dir or ".")
    files = [_write(out / "comparison.csv", report_csv(rows)), _write(out / "comparison.json", report_json(rows) + "\n")]
    lines = [f"{'policy':<10} {'energy_j':>14} {'makespan_s':>12} {'saving%':>9} {'loss%':>8} {'MFLOPS/W':>10}"]
    for r in rows:
        lines.append(
            f"{r.policy:<10} {r.total_energy_j:>14.6g} {r.makespan_s:>12.6g} {r.savings_pct:>9.3f} "
            f"{r.loss_pct:>8.3f} {r.mflops_per_watt:>10.4g}"
        )
    _say(args, *lines, *map(str, files))
    return EXIT_OK


def model_table(table_name: str, points: int, params: PowerParams) -> list[tuple[float, float, float, float]]:
    """Rows ``(n, E_race, E_stretch, ratio)`` for ``points`` slack ratios in [1, f_h/f_l], T = 1."""
    table = get_gear_table(table_name)
    if points < 1:
        raise ConfigError("points must be >= 1")
    hi = table.max_ratio
    ns = [1.0] if points == 1 else [1 + (hi - 1) * k / (points - 1) for k in range(points)]
    rows = []
    for n in ns:
        v_m = stretch_voltage(table, n)
        rows.append((n, energy_race_to_halt(params, table, 1.0, n), energy_cp_stretch(params, table, 1.0, n, v_m),
                     energy_ratio(params, table, n, v_m)))
    return rows


def cmd_model(args) -> int:
    names = list(GEAR_TABLES) if args.table == "all" else [args.table]
    params = PowerParams(*args.params)
    for name in names:
        table = get_gear_table(name)
        _say(args, f"# {table.name} ({name}): f_h={table.f_h} GHz, f_l={table.f_l} GHz")
        if args.n is not None:
            v_m = stretch_voltage(table, args.n)
            race = energy_coefficients(energy_race_to_halt, table, 1.0, args.n)
            stretch = energy_coefficients(energy_cp_stretch, table, 1.0, args.n, v_m)
            _say(
                args,
                f"n={args.n:g} v_m={v_m:g}",
                "race-to-halt coefficients (ac, i_sub, p_const): " + ", ".join(f"{c:.6g}" for c in race),
                "cp-stretch coefficients (ac, i_sub, p_const): " + ", ".join(f"{c:.6g}" for c in stretch),
            )
            continue
        _say(args, f"{'n':>9} {'E_race':>12} {'E_stretch':>12} {'ratio':>10}")
        for n, er, es, ratio in model_table(name, args.points, params):
            _say(args, f"{n:>9.4f} {er:>12.6f} {es:>12.6f} {ratio:>10.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="config or experiment JSON")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="reserved; policies are deterministic")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress stdout")

    parser = _Parser(prog="tdsdvfs", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a factorization DAG as JSON and DOT")
    p.add_argument("kind", choices=FACTORIZATIONS)
    p.add_argument("n_blocks", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", parents=[common], help="simulate one policy; write trace, schedule and report")
    p.add_argument("config_file", nargs="?", metavar="CONFIG")
    p.add_argument("--policy", choices=POLICY_NAMES)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", parents=[common], help="run several policies and tabulate savings")
    p.add_argument("config_file", nargs="?", metavar="EXPERIMENT")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("model", parents=[common], help="stretch vs race-to-halt energy ratio table")
    p.add_argument("--table", default="all", help="gear table key, or 'all'")
    p.add_argument("--points", type=int, default=11, help="samples of n in [1, f_h/f_l]")
    p.add_argument("--n", type=float, help="print coefficient probes at this slack ratio instead")
    p.add_argument("--params", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("AC", "I_SUB", "P_CONST"))
    p.set_defaults(func=cmd_model)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("config", None), ("out", None), ("seed", None), ("quiet", False)):
            if not hasattr(args, name):
                setattr(args, name, default)
        if not hasattr(args, "config_file"):
            args.config_file = None
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DagError, PowerModelError, ReportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
