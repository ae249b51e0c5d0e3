"""Command line entry point: run configured experiments and emit CSV data."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (
    ExperimentConfig,
    apply_paper_budget,
    dump_paths,
    emit_csv,
    emit_profile,
    parse_config,
    run_experiment,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbr",
        description="Neural backward-regression solvers for semilinear parabolic PDEs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("solve", help="run an experiment described by a JSON config")
    sp.add_argument("--config", required=True, help="path to a flat key/value JSON document")
    sp.add_argument("--scheme", help="override: dbr, dbdp1, rdbr or a comma-separated list")
    sp.add_argument("--seed", type=int, help="override the base seed")
    sp.add_argument("--reps", type=int, help="override the number of repetitions")
    sp.add_argument("--out", help="override the output directory")
    sp.add_argument("--paper-budget", action="store_true",
                    help="use the full-scale training budget instead of desk defaults")
    sp.add_argument("--deterministic", action="store_true",
                    help="byte-identical CSV output for identical config and seed")
    sp.add_argument("--profile-times", help="comma-separated times for solution profiles")
    sp.add_argument("--profile-grid", default="-2,2,101",
                    help="min,max,count for the profile grid along one axis")
    sp.add_argument("--profile-axis", type=int, default=0,
                    help="coordinate varied in multi-d profiles (others fixed at x0)")
    sp.add_argument("--dump-paths", action="store_true",
                    help="debug: dump simulated ensembles as paths_run{r}.csv")
    return parser


def _parse_times(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"bad --profile-times value {text!r}: {exc}") from exc


def _load_config(args) -> ExperimentConfig:
    config = parse_config(Path(args.config).read_text())
    updates = {}
    if args.scheme is not None:
        updates["scheme"] = tuple(s.strip() for s in args.scheme.split(",") if s.strip())
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.reps is not None:
        updates["repetitions"] = args.reps
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.deterministic:
        updates["deterministic"] = True
    if args.profile_times is not None:
        updates["profile_times"] = _parse_times(args.profile_times)
    if updates:
        config = replace(config, **updates)
    if args.paper_budget:
        config = apply_paper_budget(config)
    return config


def _profile_grid(problem, spec: str, axis: int):
    lo, hi, count = spec.split(",")
    lo, hi, count = float(lo), float(hi), int(count)
    if count < 1:
        raise ValueError("profile grid needs at least one point")
    pts = np.tile(problem.x0, (count, 1))
    pts[:, axis] = np.linspace(lo, hi, count)
    return pts


def _run(args) -> int:
    config = _load_config(args)
    problem = config.build_problem()
    result = run_experiment(config)
    out_dir = config.output_dir
    runs_path, summary_path = emit_csv(result, out_dir)
    print(f"wrote {runs_path} and {summary_path}")

    for outcome in result.outcomes:
        s = outcome.stats
        if s is not None:
            print(
                f"{outcome.scheme} {config.problem} d={config.d} N={config.N}: "
                f"mean={s.mean:.6f} std={s.std:.6f} mae={s.mae:.6f} rel_err={s.rel_err:.6f}"
            )
        for rep in outcome.reports:
            if rep.failed:
                print(f"{outcome.scheme} run {rep.run} (seed {rep.seed}) FAILED: {rep.error}",
                      file=sys.stderr)

    if config.profile_times:
        multi = len(config.scheme) > 1
        axis = args.profile_axis
        grid_pts = _profile_grid(problem, args.profile_grid, axis)
        for outcome in result.outcomes:
            first = next((r for r in outcome.results if r is not None), None)
            if first is None:
                continue
            for t in config.profile_times:
                name = None if not multi else f"profile_{outcome.scheme}_t{t:g}.csv"
                path, t_used = emit_profile(
                    first.solution, problem, t, grid_pts, out_dir, axis=axis, filename=name
                )
                print(f"wrote {path} (evaluated at grid node t={t_used:g})")

    if args.dump_paths:
        for path in dump_paths(result, out_dir):
            print(f"wrote {path}")

    return 1 if result.any_failed else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
