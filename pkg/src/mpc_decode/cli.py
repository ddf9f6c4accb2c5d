"""Command-line entry points.

Exit codes: 0 success, 1 configuration error (bad flags, missing files,
schema violations), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import string
import sys

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .baselines import BaselineConfig
from .core import ConfigError, RunConfig
from .diagnostics import (
    CalibrationRecord,
    MYOPIC_THRESHOLD,
    ece,
    ece_binary,
    myopic_gap_exact,
    spearman_rho,
)
from .harness import (
    ExperimentSpec,
    load_policy,
    pareto_frontier,
    read_results,
    run_experiment,
    simulate_sample_efficiency,
    write_results,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_TOP_KEYS = {
    "name", "method", "env_suite", "policy", "repeats", "budget_axis",
    "model_params", "workers", "goal_match_bonus", "run", "baseline", "sweep",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # unknown flags are configuration errors
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _interpolate(value):
    if isinstance(value, str) and "${" in value:
        try:
            return string.Template(value).substitute(os.environ)
        except KeyError as e:
            raise ConfigError(f"undefined environment variable {e.args[0]!r}") from e
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def load_experiment_file(path: str) -> ExperimentSpec:
    if not os.path.exists(path):
        raise ConfigError(f"experiment file {path!r} does not exist")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    raw = _interpolate(raw)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for section, cls in (("run", RunConfig), ("baseline", BaselineConfig)):
        extra = set(raw.get(section, {})) - {f.name for f in dataclasses.fields(cls)}
        if extra:
            raise ConfigError(f"{path}: unknown {section} keys {sorted(extra)}")
    for key in ("name", "method", "env_suite", "policy"):
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
    spec = ExperimentSpec(
        name=raw["name"],
        method=raw["method"],
        env_suite=raw["env_suite"],
        policy=raw["policy"],
        run=RunConfig(**raw.get("run", {})),
        baseline=BaselineConfig(**raw.get("baseline", {})),
        sweep=dict(raw.get("sweep", {})),
        repeats=int(raw.get("repeats", 1)),
        budget_axis=raw.get("budget_axis", "flops"),
        model_params=float(raw.get("model_params", 8e9)),
        workers=int(raw.get("workers", 1)),
        goal_match_bonus=bool(raw.get("goal_match_bonus", True)),
    )
    return spec.validate()


def _read_calibration(path: str) -> list[CalibrationRecord]:
    if not os.path.exists(path):
        raise ConfigError(f"records file {path!r} does not exist")
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{lineno}: {e.msg} at char {e.pos}") from e
            if "score" not in rec or "label" not in rec:
                raise ConfigError(f"{path}:{lineno}: record needs 'score' and 'label'")
            records.append(
                CalibrationRecord(
                    trajectory_id=str(rec.get("trajectory_id", lineno)),
                    step=int(rec.get("step", 0)),
                    score=float(rec["score"]),
                    label=float(rec["label"]),
                )
            )
    if not records:
        raise ConfigError(f"{path}: no records")
    return records


def build_parser() -> _Parser:
    # --out/--seed are accepted both before and after the subcommand; the
    # subcommand copies suppress their defaults so they never clobber values
    # parsed at the top level
    top = argparse.ArgumentParser(add_help=False)
    top.add_argument("--out", default="out", help="output directory")
    top.add_argument("--seed", type=int, default=None, help="root seed override")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="root seed override")

    p = _Parser(prog="mpc-decode", description=__doc__, parents=[top])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured experiment", parents=[common])
    run.add_argument("spec_file")

    sim = sub.add_parser("simulate", help="list-sum sample-efficiency simulation",
                         parents=[common])
    sim.add_argument("--scales", type=int, nargs="+", default=[4, 8, 16])
    sim.add_argument("--alphabet", type=int, default=10)
    sim.add_argument("--prior-temps", type=float, nargs="+", default=[math.inf])
    sim.add_argument("--budgets", type=int, nargs="+", default=[1000])
    sim.add_argument("--repeats", type=int, default=30)

    diag = sub.add_parser("diagnose", help="measurement tools")
    diag_sub = diag.add_subparsers(dest="diagnostic", required=True)
    gap = diag_sub.add_parser("myopic-gap", help="exact myopia gap of a policy",
                              parents=[common])
    gap.add_argument("policy_file")
    gap.add_argument("--horizon", type=int, default=None)
    gap.add_argument("--threshold", type=float, default=MYOPIC_THRESHOLD)

    cal = sub.add_parser("calibrate", help="calibration metrics over records",
                         parents=[common])
    cal.add_argument("records_file")
    cal.add_argument("--bins", type=int, default=10)
    cal.add_argument("--binary-threshold", type=float, default=None)

    par = sub.add_parser("pareto", help="extract the compute/accuracy frontier",
                         parents=[common])
    par.add_argument("results_file")
    par.add_argument("--x", default="flops")
    par.add_argument("--y", default="success")
    return p


def _cmd_run(args) -> int:
    spec = load_experiment_file(args.spec_file)
    rows = run_experiment(spec, out_dir=args.out, root_seed=args.seed)
    failures = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} rows written to {args.out}/results.csv ({failures} errored)")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    rows = simulate_sample_efficiency(
        scales=args.scales,
        alphabet_size=args.alphabet,
        prior_temps=args.prior_temps,
        budgets=args.budgets,
        repeats=args.repeats,
        seed=args.seed if args.seed is not None else 0,
        out_dir=args.out,
    )
    print(f"{len(rows)} rows written to {args.out}/simulation.csv")
    return EXIT_OK


def _cmd_myopic_gap(args) -> int:
    if not os.path.exists(args.policy_file):
        raise ConfigError(f"policy file {args.policy_file!r} does not exist")
    policy = load_policy(args.policy_file)
    horizon = args.horizon
    if horizon is None:
        spec = getattr(policy, "spec", None)
        prefixes = getattr(spec, "cond_probs", None)
        if prefixes:
            horizon = max(len(k) for k in prefixes) + 1
        else:
            raise ConfigError("--horizon is required for this policy type")
    gap = myopic_gap_exact(policy, horizon)
    myopic = gap > args.threshold
    rows = [{
        "metric": "myopic_gap", "value": repr(gap), "variant": "exact",
        "bins": "", "threshold": args.threshold, "classification": "myopic" if myopic else "non-myopic",
    }]
    write_results(rows, ["metric", "value", "variant", "bins", "threshold", "classification"],
                  args.out, name="myopic_gap")
    print(f"myopic gap p* = {gap:.6g} ({'myopic' if myopic else 'non-myopic'} at {args.threshold})")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    records = _read_calibration(args.records_file)
    rows = []
    if args.binary_threshold is not None:
        value = ece_binary(records, threshold=args.binary_threshold)
        rows.append({
            "metric": "ece", "value": repr(value), "variant": "binary",
            "bins": 2, "threshold": args.binary_threshold,
        })
    else:
        value = ece(records, bins=args.bins)
        rows.append({
            "metric": "ece", "value": repr(value), "variant": "equal_width",
            "bins": args.bins, "threshold": "",
        })
    try:
        rho = spearman_rho([r.score for r in records], [r.label for r in records])
        rows.append({
            "metric": "spearman_rho", "value": repr(rho), "variant": "average_rank",
            "bins": "", "threshold": "",
        })
    except Exception as e:
        rows.append({
            "metric": "spearman_rho", "value": f"error: {e}", "variant": "average_rank",
            "bins": "", "threshold": "",
        })
    write_results(rows, ["metric", "value", "variant", "bins", "threshold"], args.out,
                  name="calibration")
    for r in rows:
        print(f"{r['metric']}: {r['value']}")
    return EXIT_OK


def _cmd_pareto(args) -> int:
    if not os.path.exists(args.results_file):
        raise ConfigError(f"results file {args.results_file!r} does not exist")
    rows = read_results(args.results_file)
    if not rows:
        raise ConfigError(f"{args.results_file}: no rows")
    frontier = pareto_frontier(rows, x_key=args.x, y_key=args.y)
    columns = list(rows[0].keys())
    write_results(frontier, columns, args.out, name="pareto")
    print(f"{len(frontier)} frontier rows written to {args.out}/pareto.csv")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "diagnose":
            return _cmd_myopic_gap(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        if args.command == "pareto":
            return _cmd_pareto(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # argparse -h
        return int(e.code or 0)
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
