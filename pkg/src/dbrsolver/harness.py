"""Experiment configuration, repeated-run orchestration and CSV emission."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import ProblemSpec, RunReport, SummaryStats, TimeGrid, summarize
from .paths import RngStream, write_paths_csv
from .problems import get_problem
from .schemes import SOLVERS, SchemeSolution, SolveResult, TrainConfig

SCHEMES = ("dbr", "dbdp1", "rdbr")

_REQUIRED_KEYS = ("problem", "d")

_DEFAULTS = {
    "T": 1.0,
    "N": 10,
    "M": 2000,
    "K": 64,
    "batch": 400,
    "iterations": 1500,
    "learning_rate": 5e-4,
    "hidden": None,
    "scheme": "dbr",
    "repetitions": 1,
    "seed": 0,
    "deterministic": False,
    "output_dir": "results",
    "input_scaling": False,
    "stop_gradient_generator": False,
    "warm_start": False,
    "resample_outer": False,
    "lr_decay": False,
    "profile_times": (),
    "s0": 36.0,
    "strike": 40.0,
    "rate": 0.06,
    "vol": 0.2,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; unknown or ill-typed keys are rejected."""

    problem: str
    d: int
    T: float = 1.0
    N: int = 10
    M: int = 2000
    K: int = 64
    batch: int = 400
    iterations: int = 1500
    learning_rate: float = 5e-4
    hidden: Optional[tuple] = None
    scheme: tuple = ("dbr",)
    repetitions: int = 1
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "results"
    input_scaling: bool = False
    stop_gradient_generator: bool = False
    warm_start: bool = False
    resample_outer: bool = False
    lr_decay: bool = False
    profile_times: tuple = ()
    s0: float = 36.0
    strike: float = 40.0
    rate: float = 0.06
    vol: float = 0.2

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"config key 'd' must be >= 1, got {self.d}")
        for key in ("N", "M", "K", "repetitions", "iterations"):
            if getattr(self, key) < 1:
                raise ValueError(f"config key '{key}' must be >= 1, got {getattr(self, key)}")
        if not 1 <= self.batch <= self.M:
            raise ValueError(f"config key 'batch' must satisfy 1 <= batch <= M, got {self.batch}")
        if self.T <= 0:
            raise ValueError(f"config key 'T' must be positive, got {self.T}")
        if self.learning_rate <= 0:
            raise ValueError(f"config key 'learning_rate' must be positive, got {self.learning_rate}")
        for s in self.scheme:
            if s not in SCHEMES:
                raise ValueError(f"config key 'scheme' must name one of {SCHEMES}, got {s!r}")
        if self.hidden is not None and any(n < 1 for n in self.hidden):
            raise ValueError(f"config key 'hidden' entries must be >= 1, got {self.hidden}")

    def hidden_sizes(self) -> tuple:
        if self.hidden is not None:
            return tuple(self.hidden)
        return (self.d + 110, self.d + 110)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden=self.hidden_sizes(),
            branches=self.K,
            outer=self.M,
            batch=self.batch,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            input_scaling=self.input_scaling,
            stop_gradient_generator=self.stop_gradient_generator,
            warm_start=self.warm_start,
            resample_outer=self.resample_outer,
            lr_decay=self.lr_decay,
        )

    def build_problem(self) -> ProblemSpec:
        return get_problem(
            self.problem, self.d, horizon=self.T,
            s0=self.s0, strike=self.strike, rate=self.rate, vol=self.vol,
        )

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "d": self.d,
            "T": self.T,
            "N": self.N,
            "M": self.M,
            "K": self.K,
            "batch": self.batch,
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "hidden": None if self.hidden is None else list(self.hidden),
            "scheme": ",".join(self.scheme),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "output_dir": self.output_dir,
            "input_scaling": self.input_scaling,
            "stop_gradient_generator": self.stop_gradient_generator,
            "warm_start": self.warm_start,
            "resample_outer": self.resample_outer,
            "lr_decay": self.lr_decay,
            "profile_times": list(self.profile_times),
            "s0": self.s0,
            "strike": self.strike,
            "rate": self.rate,
            "vol": self.vol,
        }


def _check_type(key, value, kinds, desc):
    if isinstance(value, bool) and bool not in kinds:
        raise ValueError(f"config key '{key}' must be {desc}, got boolean {value!r}")
    if not isinstance(value, kinds):
        raise ValueError(f"config key '{key}' must be {desc}, got {value!r}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a flat key/value mapping; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ValueError("config document must be a flat JSON object")
    known = set(_REQUIRED_KEYS) | set(_DEFAULTS)
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown config key '{key}'")
    for key in _REQUIRED_KEYS:
        if key not in raw:
            raise ValueError(f"missing required config key '{key}'")

    merged = dict(_DEFAULTS)
    merged.update(raw)

    problem = _check_type("problem", merged["problem"], (str,), "a string")
    ints = {k: _check_type(k, merged[k], (int,), "an integer")
            for k in ("d", "N", "M", "K", "batch", "iterations", "repetitions", "seed")}
    floats = {k: float(_check_type(k, merged[k], (int, float), "a number"))
              for k in ("T", "learning_rate", "s0", "strike", "rate", "vol")}
    bools = {k: _check_type(k, merged[k], (bool,), "a boolean")
             for k in ("deterministic", "input_scaling", "stop_gradient_generator",
                       "warm_start", "resample_outer", "lr_decay")}
    output_dir = _check_type("output_dir", merged["output_dir"], (str,), "a string")

    hidden = merged["hidden"]
    if hidden is not None:
        if not isinstance(hidden, (list, tuple)) or not all(
            isinstance(n, int) and not isinstance(n, bool) for n in hidden
        ):
            raise ValueError(f"config key 'hidden' must be a list of integers, got {hidden!r}")
        hidden = tuple(hidden)

    scheme = merged["scheme"]
    if isinstance(scheme, str):
        scheme = tuple(s.strip() for s in scheme.split(",") if s.strip())
    elif isinstance(scheme, (list, tuple)) and all(isinstance(s, str) for s in scheme):
        scheme = tuple(scheme)
    else:
        raise ValueError(f"config key 'scheme' must be a string or list of strings, got {scheme!r}")
    if not scheme:
        raise ValueError("config key 'scheme' must name at least one scheme")

    times = merged["profile_times"]
    if not isinstance(times, (list, tuple)) or not all(
        isinstance(t, (int, float)) and not isinstance(t, bool) for t in times
    ):
        raise ValueError(f"config key 'profile_times' must be a list of numbers, got {times!r}")

    return ExperimentConfig(
        problem=problem,
        hidden=hidden,
        scheme=scheme,
        output_dir=output_dir,
        profile_times=tuple(float(t) for t in times),
        **ints,
        **floats,
        **bools,
    )


def parse_config(text: str) -> ExperimentConfig:
    """Parse a flat key/value JSON document into a validated config."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config document is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical JSON form; parse(serialize(c)) == c."""
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def apply_paper_budget(config: ExperimentConfig) -> ExperimentConfig:
    """Switch to the full-scale training budget of the reference experiments."""
    if config.problem == "example2":
        return replace(config, iterations=3000, batch=400,
                       hidden=config.hidden or (config.d + 10, config.d + 10))
    return replace(config, M=10000, iterations=6000)


@dataclass
class SchemeOutcome:
    """All repetitions of one scheme plus their aggregate."""

    scheme: str
    reports: List[RunReport]
    results: List[Optional[SolveResult]]
    stats: Optional[SummaryStats]

    @property
    def estimates(self) -> List[float]:
        return [r.estimate for r in self.reports if not r.failed]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    truth: Optional[float]
    outcomes: List[SchemeOutcome]

    @property
    def any_failed(self) -> bool:
        return any(r.failed for o in self.outcomes for r in o.reports)


def _worker_count(reps: int) -> int:
    cap_raw = os.environ.get("DBR_THREADS", "")
    try:
        cap = int(cap_raw) if cap_raw else 0
    except ValueError:
        cap = 0
    limit = cap if cap > 0 else (os.cpu_count() or 1)
    return max(1, min(reps, limit))


def _run_single(scheme, problem, grid, train_cfg, config, run_idx, keep_solution):
    seed = config.seed + run_idx
    stream = RngStream(seed=seed, run=run_idx)
    start = time.perf_counter()
    try:
        result = SOLVERS[scheme](problem, grid, train_cfg, stream)
    except Exception as exc:  # noqa: BLE001 - any run failure is recorded, not fatal
        seconds = 0.0 if config.deterministic else time.perf_counter() - start
        report = RunReport(run=run_idx, seed=seed, estimate=float("nan"),
                           seconds=seconds, error=f"{type(exc).__name__}: {exc}")
        return report, None
    seconds = 0.0 if config.deterministic else time.perf_counter() - start
    report = RunReport(
        run=run_idx,
        seed=seed,
        estimate=result.estimate,
        seconds=seconds,
        initial_losses_y=tuple(r.y_initial for r in result.step_records),
        final_losses_y=tuple(r.y_final for r in result.step_records),
        initial_losses_z=tuple(r.z_initial for r in result.step_records),
        final_losses_z=tuple(r.z_final for r in result.step_records),
    )
    return report, (result if keep_solution else None)


def _aggregate(estimates, truth) -> Optional[SummaryStats]:
    if not estimates:
        return None
    if truth is None or truth == 0:
        vals = np.asarray(estimates)
        mean = float(vals.mean())
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        mae = float("nan") if truth is None else float(np.abs(vals).mean())
        return SummaryStats(mean=mean, std=std, mae=mae, rel_err=float("nan"))
    return summarize(estimates, truth)


def run_experiment(config: ExperimentConfig, keep_solutions: bool = True) -> ExperimentResult:
    """Execute R repetitions per scheme with seeds base_seed + run_index.

    Repetitions run on independent streams and may execute in parallel
    (capped by the DBR_THREADS environment variable); results are identical
    either way. Failed runs are recorded and do not abort the experiment.
    """
    problem = config.build_problem()
    grid = config.grid()
    train_cfg = config.train_config()
    truth = problem.analytic.value_at(0.0, problem.x0) if problem.analytic else None
    outcomes = []
    for scheme in config.scheme:
        reps = config.repetitions
        workers = _worker_count(reps)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                pairs = list(pool.map(
                    lambda r: _run_single(scheme, problem, grid, train_cfg, config, r, keep_solutions),
                    range(reps),
                ))
        else:
            pairs = [_run_single(scheme, problem, grid, train_cfg, config, r, keep_solutions)
                     for r in range(reps)]
        reports = [p[0] for p in pairs]
        results = [p[1] for p in pairs]
        stats = _aggregate([r.estimate for r in reports if not r.failed], truth)
        outcomes.append(SchemeOutcome(scheme=scheme, reports=reports, results=results, stats=stats))
    return ExperimentResult(config=config, truth=truth, outcomes=outcomes)


RUNS_HEADER = "scheme,problem,d,N,run,seed,u_true,u_hat,abs_err,seconds"
SUMMARY_HEADER = "scheme,problem,d,N,u_true,mean,std,mae,rel_err"


def _fmt(value) -> str:
    if value is None:
        return "nan"
    return f"{value:.6f}"


def emit_csv(result: ExperimentResult, out_dir) -> tuple:
    """Write runs.csv and summary.csv with 6-decimal fixed formatting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    truth = result.truth

    runs_path = out / "runs.csv"
    lines = [RUNS_HEADER]
    for outcome in result.outcomes:
        for rep in outcome.reports:
            abs_err = None if (truth is None or rep.failed) else abs(truth - rep.estimate)
            lines.append(",".join([
                outcome.scheme, cfg.problem, str(cfg.d), str(cfg.N),
                str(rep.run), str(rep.seed),
                _fmt(truth), _fmt(rep.estimate), _fmt(abs_err), _fmt(rep.seconds),
            ]))
    runs_path.write_text("\n".join(lines) + "\n")

    summary_path = out / "summary.csv"
    lines = [SUMMARY_HEADER]
    for outcome in result.outcomes:
        s = outcome.stats
        lines.append(",".join([
            outcome.scheme, cfg.problem, str(cfg.d), str(cfg.N), _fmt(truth),
            _fmt(s.mean if s else None), _fmt(s.std if s else None),
            _fmt(s.mae if s else None), _fmt(s.rel_err if s else None),
        ]))
    summary_path.write_text("\n".join(lines) + "\n")
    return runs_path, summary_path


def emit_profile(
    solution: SchemeSolution,
    problem: ProblemSpec,
    t: float,
    x_grid,
    out_dir,
    axis: int = 0,
    filename: Optional[str] = None,
) -> tuple:
    """Write profile_t{t}.csv with columns x, u_true, u_est at the nearest node.

    The scheme only defines networks at grid nodes, so t snaps to the nearest
    node; the snapped time is returned alongside the path.
    """
    grid = solution.grid
    i = min(max(int(round(t / grid.h)), 0), grid.steps)
    t_node = grid.node(i)
    pts = np.atleast_2d(np.asarray(x_grid, dtype=float))
    if pts.shape[1] != problem.dim:
        raise ValueError(f"profile grid must have {problem.dim} columns, got {pts.shape[1]}")
    u_est = solution.evaluate_y(i, pts)
    u_true = problem.analytic.u(t_node, pts) if problem.analytic else [None] * len(pts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (filename or f"profile_t{t:g}.csv")
    lines = ["x,u_true,u_est"]
    for j in range(pts.shape[0]):
        lines.append(f"{pts[j, axis]:.6f},{_fmt(u_true[j])},{_fmt(u_est[j])}")
    path.write_text("\n".join(lines) + "\n")
    return path, t_node


def dump_paths(result: ExperimentResult, out_dir) -> list:
    """Debug dump of every kept ensemble as paths_run{r}.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    multi = len(result.outcomes) > 1
    for outcome in result.outcomes:
        for rep, solve in zip(outcome.reports, outcome.results):
            if solve is None:
                continue
            name = (f"paths_{outcome.scheme}_run{rep.run}.csv" if multi
                    else f"paths_run{rep.run}.csv")
            path = out / name
            write_paths_csv(solve.ensemble, path)
            written.append(path)
    return written
