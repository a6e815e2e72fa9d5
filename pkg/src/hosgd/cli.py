"""Command-line entry point: ``hosgd run | verify | bound | replay``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .analysis import theoretical_bound
from .core import AssumptionConstants, RunConfig, mu_default
from .experiment import (RunSpec, SpecError, execute, manifest, parse_experiment,
                         run_spec_from_manifest)
from .reporting import (plot_comparison, read_trajectory_csv, trajectory_csv, write_json)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"hosgd: {msg}", file=sys.stderr)


def _seed_override() -> Optional[int]:
    raw = os.environ.get("HOSGD_SEED_OVERRIDE")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise SpecError(f"HOSGD_SEED_OVERRIDE: not an integer: {raw!r}")


def _execute_job(job):
    config, constants = job
    traj = execute(config, constants)
    return trajectory_csv(traj), traj.error


def _run_specs(runs: List[RunSpec], out_dir: Path, jobs: int, figures: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(rs, cfg) for rs in runs for cfg in rs.configs]
    job_args = [(cfg, rs.constants) for rs, cfg in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_job, job_args))
    else:
        results = [_execute_job(a) for a in job_args]

    diverged = []
    for (rs, cfg), (csv_text, error) in zip(tasks, results):
        path = out_dir / f"{rs.label}_seed{cfg.master_seed}.csv"
        path.write_text(csv_text)
        if error:
            diverged.append(f"{rs.label} (seed {cfg.master_seed}): {error}")
    for rs in runs:
        write_json(manifest(rs), out_dir / f"{rs.label}.json")

    if figures:
        curves = {rs.label: [read_trajectory_csv(out_dir / f"{rs.label}_seed{c.master_seed}.csv")
                             for c in rs.configs] for rs in runs}
        for path in plot_comparison(curves, out_dir):
            print(f"wrote {path}")
    print(f"wrote {len(tasks)} trajectories to {out_dir}")
    if diverged:
        for line in diverged:
            _err(f"run diverged: {line}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        text = Path(args.spec).read_text()
    except OSError as exc:
        _err(f"cannot read {args.spec}: {exc}")
        return EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            spec = parse_experiment(text, _seed_override())
    except SpecError as exc:
        _err(f"{args.spec}: {exc}")
        return EXIT_USAGE
    out_dir = Path(args.out or spec.output_dir)
    return _run_specs(spec.runs, out_dir, args.jobs, not args.no_figures)


def cmd_replay(args) -> int:
    try:
        rs = run_spec_from_manifest(json.loads(Path(args.manifest).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        _err(f"{args.manifest}: {exc}")
        return EXIT_USAGE
    return _run_specs([rs], Path(args.out), 1, not args.no_figures)


def cmd_verify(args) -> int:
    from .verify import run_suite

    level = "full" if args.full else "fast"
    outcomes = run_suite(level)
    width = max(len(o.name) for o in outcomes)
    print(f"{'property':<{width}}  result  seconds  detail")
    for o in outcomes:
        print(f"{o.name:<{width}}  {'PASS' if o.passed else 'FAIL':<6}  {o.seconds:7.2f}  {o.detail}")
    failed = [o for o in outcomes if not o.passed]
    if failed:
        for o in failed:
            _err(f"property failed: {o.name}: {o.detail}")
        return EXIT_FAIL
    print(f"all {len(outcomes)} properties passed ({level})")
    return EXIT_OK


BOUND_KEYS = {"d", "m", "B", "tau", "N", "mu", "step", "L", "sigma", "f_star", "f0"}


def load_bound_config(text: str):
    data = tomllib.loads(text)
    for key in data:
        if key not in BOUND_KEYS:
            raise SpecError(f"{key}: unknown field")
    missing = [k for k in ("L", "sigma", "f_star", "f0") if k not in data]
    if missing:
        raise SpecError(f"missing constants: {', '.join(missing)}")
    for k in ("d", "N"):
        if k not in data:
            raise SpecError(f"{k}: required field missing")
    d, N = int(data["d"]), int(data["N"])
    mu = data.get("mu", "theorem_default")
    mu = mu_default(d, N) if mu == "theorem_default" else float(mu)
    step = data.get("step", "theorem_default")
    try:
        config = RunConfig(d=d, m=int(data.get("m", 1)), B=int(data.get("B", 1)),
                           tau=int(data.get("tau", 1)), mu=mu, N=N,
                           step_schedule=step if isinstance(step, str) else float(step))
        constants = AssumptionConstants(L=float(data["L"]), sigma=float(data["sigma"]),
                                        f_star=float(data["f_star"]))
    except ValueError as exc:
        raise SpecError(str(exc)) from exc
    return config, constants, float(data["f0"])


def cmd_bound(args) -> int:
    try:
        config, constants, f0 = load_bound_config(Path(args.config).read_text())
    except OSError as exc:
        _err(f"cannot read {args.config}: {exc}")
        return EXIT_USAGE
    except (SpecError, tomllib.TOMLDecodeError) as exc:
        _err(f"{args.config}: {exc}")
        return EXIT_USAGE
    report = theoretical_bound(config, constants, f0)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
        return EXIT_OK
    width = max(len(n) for n, _ in report.term_breakdown)
    for name, value in report.term_breakdown:
        print(f"{name:<{width}}  {value:.17g}")
    print(f"{'rhs_total':<{width}}  {report.rhs_total:.17g}")
    step_ok, mu_ok, n_ok = report.preconditions_met
    print(f"precondition step_size: {step_ok} (alpha={report.step_size:.6g})")
    print(f"precondition mu: {mu_ok} (mu={config.mu:.6g}, max {report.mu_max:.6g})")
    print(f"precondition N: {n_ok} (N={config.N}, need >= {report.N_min})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hosgd", description="hybrid-order distributed SGD simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment spec")
    p.add_argument("spec")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--full", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bound", help="evaluate the convergence bound for a config")
    p.add_argument("config")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("replay", help="re-run every seed recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
