"""Backward-induction solvers sharing the path and network engines.

Three schemes are provided under their CLI ids:

- ``dbr``   -- per step, regress one network onto the branch-averaged
  one-step value and one onto the branch-averaged Malliavin-style quotient,
  training the gradient network first, then the value network;
- ``dbdp1`` -- the pathwise baseline that jointly fits the value/gradient
  pair against the raw one-step label containing the Brownian increment;
- ``rdbr``  -- the obstacle variant of ``dbr``: next-step labels and the
  reported solution are clipped from below by the obstacle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .core import ProblemSpec, TimeGrid
from .neuralnet import (
    AdamState,
    MlpNetwork,
    adam_update,
    backward_from_cache,
    forward_batch,
    init_xavier,
    _forward_cached,
)
from .paths import (
    BranchBatch,
    PathEnsemble,
    RngStream,
    PURPOSE_BRANCH,
    PURPOSE_INIT_Y,
    PURPOSE_INIT_Z,
    PURPOSE_OUTER,
    PURPOSE_SGD_Y,
    PURPOSE_SGD_Z,
    sample_branches,
    simulate_forward,
)

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    """Per-run training budget and network shape."""

    hidden: tuple
    branches: int = 64
    outer: int = 2000
    batch: int = 400
    iterations: int = 1500
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_scaling: bool = False
    stop_gradient_generator: bool = False
    warm_start: bool = False
    resample_outer: bool = False
    lr_decay: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(n) for n in self.hidden))
        if any(n < 1 for n in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden}")
        for name in ("branches", "outer", "iterations"):
            if getattr(self, name) < (0 if name == "iterations" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 1 <= self.batch <= self.outer:
            raise ValueError(f"batch must satisfy 1 <= batch <= outer samples, got {self.batch}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class StepTargets:
    """Cached regression labels for one time step; immutable during SGD."""

    step: int
    y_base: Array
    z_target: Array


@dataclass
class SchemeSolution:
    """Trained per-step network pairs plus the exact terminal function."""

    scheme: str
    grid: TimeGrid
    problem: ProblemSpec
    y_nets: List[Optional[MlpNetwork]]
    z_nets: List[Optional[MlpNetwork]]
    reflected: bool = False

    def evaluate_y(self, i: int, points: Array) -> Array:
        """Value approximation at node i; i = N returns the terminal exactly."""
        pts = np.asarray(points, dtype=float)
        if not 0 <= i <= self.grid.steps:
            raise IndexError(f"node index {i} outside 0..{self.grid.steps}")
        if i == self.grid.steps:
            return self.problem.terminal(pts)
        net = self.y_nets[i]
        if net is None:
            raise ValueError(f"value network at step {i} has not been trained")
        vals = forward_batch(net, _time_inputs(self.grid.node(i), pts))[:, 0]
        if self.reflected:
            vals = np.maximum(vals, self.problem.obstacle(pts))
        return vals

    def evaluate_z(self, i: int, points: Array) -> Array:
        if not 0 <= i <= self.grid.steps - 1:
            raise IndexError(f"node index {i} outside 0..{self.grid.steps - 1}")
        net = self.z_nets[i]
        if net is None:
            raise ValueError(f"gradient network at step {i} has not been trained")
        return forward_batch(net, _time_inputs(self.grid.node(i), np.asarray(points, dtype=float)))


@dataclass(frozen=True)
class StepRecord:
    """Full-ensemble losses before and after training at one step."""

    step: int
    z_initial: float
    z_final: float
    y_initial: float
    y_final: float


@dataclass(frozen=True)
class SolveResult:
    solution: SchemeSolution
    estimate: float
    step_records: tuple
    ensemble: PathEnsemble


def _time_inputs(t: float, X: Array) -> Array:
    return np.concatenate([np.full((X.shape[0], 1), t), X], axis=1)


def evaluate_y_next(solution: SchemeSolution, problem: ProblemSpec, i_next: int, points: Array) -> Array:
    """Next-step value used for branch labels; obstacle clip when reflected."""
    if not 1 <= i_next <= solution.grid.steps:
        raise IndexError(f"i_next {i_next} outside 1..{solution.grid.steps}")
    del problem  # the solution carries its own problem spec
    return solution.evaluate_y(i_next, points)


def compute_step_targets(
    problem: ProblemSpec,
    grid: TimeGrid,
    i: int,
    outer_states: Array,
    branches: BranchBatch,
    y_next: Callable[[Array], Array],
) -> StepTargets:
    """Branch-averaged labels: value mean and the increment-weighted quotient.

    y_base[m]   = mean_k  Yhat_{i+1}[m, k]
    z_target[m] = mean_k  Yhat_{i+1}[m, k] * dW[m, k] / h
    """
    del outer_states  # labels depend on the branches only
    h = grid.h
    if h == 0:
        raise ValueError("degenerate grid: step size h must be positive")
    m, k, d = branches.next_states.shape
    y_base = np.empty(m)
    z_target = np.empty((m, d))
    block = max(1, 65536 // k)
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        vals = y_next(branches.next_states[lo:hi].reshape(-1, d)).reshape(hi - lo, k)
        y_base[lo:hi] = vals.mean(axis=1)
        z_target[lo:hi] = np.einsum("mk,mkj->mj", vals, branches.increments[lo:hi]) / (k * h)
    if not (np.isfinite(y_base).all() and np.isfinite(z_target).all()):
        raise FloatingPointError(f"non-finite regression label at step {i}")
    return StepTargets(step=i, y_base=y_base, z_target=z_target)


def _init_step_net(sizes, config: TrainConfig, stream: RngStream, inputs: Array, warm_from):
    if config.warm_start and warm_from is not None:
        # keep the donor's input scaling: rescaling would silently change
        # the function the warm parameters represent
        return warm_from.copy()
    net = init_xavier(sizes, stream)
    if config.input_scaling:
        std = inputs.std(axis=0)
        net.set_input_scaling(inputs.mean(axis=0), np.where(std > 1e-8, std, 1.0))
    return net


def _generator_dy(problem: ProblemSpec, t, X, Y, Z) -> Array:
    if problem.generator_dy is not None:
        return problem.generator_dy(t, X, Y, Z)
    delta = 1e-6 * (1.0 + np.abs(Y))
    return (problem.generator(t, X, Y + delta, Z) - problem.generator(t, X, Y - delta, Z)) / (2 * delta)


def _generator_dz(problem: ProblemSpec, t, X, Y, Z) -> Array:
    if problem.generator_dz is not None:
        return problem.generator_dz(t, X, Y, Z)
    out = np.empty_like(Z)
    for j in range(Z.shape[1]):
        delta = 1e-6 * (1.0 + np.abs(Z[:, j]))
        up = Z.copy()
        up[:, j] += delta
        dn = Z.copy()
        dn[:, j] -= delta
        out[:, j] = (problem.generator(t, X, Y, up) - problem.generator(t, X, Y, dn)) / (2 * delta)
    return out


def _step_lr(config: TrainConfig, iteration: int) -> float:
    """Configured rate, optionally decayed linearly over the step's budget.

    The constant rate is the default; the decayed variant suppresses the
    final-iterate oscillation Adam exhibits at a fixed step size.
    """
    if not config.lr_decay:
        return config.learning_rate
    frac = 1.0 - iteration / max(config.iterations, 1)
    return config.learning_rate * max(frac, 0.01)


def _z_loss(net: MlpNetwork, inputs: Array, targets: Array) -> float:
    resid = forward_batch(net, inputs) - targets
    return float(np.mean(np.sum(resid * resid, axis=1)))


def _y_loss(net, inputs, y_base, z_vals, problem, t, h) -> float:
    pred = forward_batch(net, inputs)[:, 0]
    fval = problem.generator(t, inputs[:, 1:], pred, z_vals)
    resid = pred - y_base - h * fval
    return float(np.mean(resid * resid))


def train_z_step(
    outer_inputs: Array,
    z_targets: Array,
    config: TrainConfig,
    stream: RngStream,
    warm_from: Optional[MlpNetwork] = None,
    record: Optional[dict] = None,
) -> MlpNetwork:
    """Fit the gradient network to the cached z labels by mini-batch Adam."""
    m = outer_inputs.shape[0]
    sizes = (outer_inputs.shape[1], *config.hidden, z_targets.shape[1])
    net = _init_step_net(sizes, config, stream.with_purpose(PURPOSE_INIT_Z), outer_inputs, warm_from)
    if record is not None:
        record["initial_loss"] = _z_loss(net, outer_inputs, z_targets)
    state = AdamState.for_network(net, config.beta1, config.beta2, config.eps)
    rng = stream.with_purpose(PURPOSE_SGD_Z).generator()
    scale = 2.0 / config.batch
    for it in range(config.iterations):
        idx = rng.integers(0, m, size=config.batch)
        xb = outer_inputs[idx]
        acts = _forward_cached(net, xb)
        resid = acts[-1] - z_targets[idx]
        if not np.isfinite(resid).all():
            raise FloatingPointError(f"non-finite z-regression loss at step {stream.step}")
        adam_update(state, net, backward_from_cache(net, acts, scale * resid), _step_lr(config, it))
    if record is not None:
        record["final_loss"] = _z_loss(net, outer_inputs, z_targets)
    return net


def train_y_step(
    outer_inputs: Array,
    y_base: Array,
    z_net: MlpNetwork,
    problem: ProblemSpec,
    t_i: float,
    h: float,
    config: TrainConfig,
    stream: RngStream,
    warm_from: Optional[MlpNetwork] = None,
    record: Optional[dict] = None,
) -> MlpNetwork:
    """Fit the value network against its own prediction inside the driver.

    Minimizes mean |net(p) - y_base - h f(t, x, net(p), z)|^2 where z comes
    from the frozen gradient network; the gradient flows through both
    occurrences of the prediction unless ``stop_gradient_generator`` is set.
    """
    m = outer_inputs.shape[0]
    x_outer = outer_inputs[:, 1:]
    z_vals = forward_batch(z_net, outer_inputs)
    sizes = (outer_inputs.shape[1], *config.hidden, 1)
    net = _init_step_net(sizes, config, stream.with_purpose(PURPOSE_INIT_Y), outer_inputs, warm_from)
    if record is not None:
        record["initial_loss"] = _y_loss(net, outer_inputs, y_base, z_vals, problem, t_i, h)
    state = AdamState.for_network(net, config.beta1, config.beta2, config.eps)
    rng = stream.with_purpose(PURPOSE_SGD_Y).generator()
    scale = 2.0 / config.batch
    for it in range(config.iterations):
        idx = rng.integers(0, m, size=config.batch)
        xb = outer_inputs[idx]
        acts = _forward_cached(net, xb)
        pred = acts[-1][:, 0]
        zb = z_vals[idx]
        fval = problem.generator(t_i, x_outer[idx], pred, zb)
        if not np.isfinite(fval).all():
            bad = int(idx[np.argwhere(~np.isfinite(fval))[0][0]])
            raise FloatingPointError(f"non-finite generator output at sample {bad}, step {stream.step}")
        resid = pred - y_base[idx] - h * fval
        if config.stop_gradient_generator:
            coupling = 1.0
        else:
            coupling = 1.0 - h * _generator_dy(problem, t_i, x_outer[idx], pred, zb)
        out_grads = (scale * resid * coupling)[:, None]
        adam_update(state, net, backward_from_cache(net, acts, out_grads), _step_lr(config, it))
    if record is not None:
        record["final_loss"] = _y_loss(net, outer_inputs, y_base, z_vals, problem, t_i, h)
    return net


def _backward_solve(problem, grid, config, stream, reflected: bool, scheme: str) -> SolveResult:
    n = grid.steps
    solution = SchemeSolution(
        scheme=scheme,
        grid=grid,
        problem=problem,
        y_nets=[None] * n,
        z_nets=[None] * n,
        reflected=reflected,
    )
    records: List[Optional[StepRecord]] = [None] * n
    ensemble = None
    for i in range(n - 1, -1, -1):
        if ensemble is None or config.resample_outer:
            key = stream.with_step(i if config.resample_outer else 0)
            ensemble = simulate_forward(problem, grid, config.outer, key.with_purpose(PURPOSE_OUTER))
        st = stream.with_step(i)
        branches = sample_branches(problem, grid, ensemble, i, config.branches, st.with_purpose(PURPOSE_BRANCH))
        targets = compute_step_targets(
            problem, grid, i, ensemble.states[:, i], branches,
            lambda pts, j=i + 1: solution.evaluate_y(j, pts),
        )
        inputs = _time_inputs(grid.node(i), ensemble.states[:, i])
        z_rec, y_rec = {}, {}
        solution.z_nets[i] = train_z_step(
            inputs, targets.z_target, config, st,
            warm_from=solution.z_nets[i + 1] if i + 1 < n else None, record=z_rec,
        )
        solution.y_nets[i] = train_y_step(
            inputs, targets.y_base, solution.z_nets[i], problem, grid.node(i), grid.h, config, st,
            warm_from=solution.y_nets[i + 1] if i + 1 < n else None, record=y_rec,
        )
        records[i] = StepRecord(
            step=i,
            z_initial=z_rec["initial_loss"],
            z_final=z_rec["final_loss"],
            y_initial=y_rec["initial_loss"],
            y_final=y_rec["final_loss"],
        )
    estimate = float(solution.evaluate_y(0, problem.x0[None, :])[0])
    return SolveResult(solution=solution, estimate=estimate, step_records=tuple(records), ensemble=ensemble)


def dbr_solve(problem: ProblemSpec, grid: TimeGrid, config: TrainConfig, stream: RngStream) -> SolveResult:
    """Backward induction with branch-averaged labels; z first, then y."""
    return _backward_solve(problem, grid, config, stream, reflected=False, scheme="dbr")


def rdbr_solve(problem: ProblemSpec, grid: TimeGrid, config: TrainConfig, stream: RngStream) -> SolveResult:
    """Reflected variant: labels and outputs are clipped by the obstacle."""
    if not problem.has_obstacle:
        raise ValueError("rdbr requires a problem with an obstacle")
    return _backward_solve(problem, grid, config, stream, reflected=True, scheme="rdbr")


def _dbdp1_loss(y_net, z_net, inputs, y_next_vals, dw, problem, t, h) -> float:
    pred_y = forward_batch(y_net, inputs)[:, 0]
    pred_z = forward_batch(z_net, inputs)
    fval = problem.generator(t, inputs[:, 1:], pred_y, pred_z)
    resid = pred_y - y_next_vals - h * fval + np.sum(pred_z * dw, axis=1)
    return float(np.mean(resid * resid))


def dbdp1_step(
    outer_inputs: Array,
    y_next_vals: Array,
    increments: Array,
    problem: ProblemSpec,
    t_i: float,
    h: float,
    config: TrainConfig,
    stream: RngStream,
    warm_y: Optional[MlpNetwork] = None,
    warm_z: Optional[MlpNetwork] = None,
    record: Optional[dict] = None,
):
    """Jointly fit the value/gradient pair on the pathwise one-step label.

    Minimizes mean |y(p) - Yhat_{i+1} - h f(t, x, y(p), z(p)) + z(p).dW|^2
    with gradients flowing into both networks.
    """
    m = outer_inputs.shape[0]
    x_outer = outer_inputs[:, 1:]
    d = x_outer.shape[1]
    y_net = _init_step_net((1 + d, *config.hidden, 1), config, stream.with_purpose(PURPOSE_INIT_Y), outer_inputs, warm_y)
    z_net = _init_step_net((1 + d, *config.hidden, d), config, stream.with_purpose(PURPOSE_INIT_Z), outer_inputs, warm_z)
    if record is not None:
        record["initial_loss"] = _dbdp1_loss(y_net, z_net, outer_inputs, y_next_vals, increments, problem, t_i, h)
    state_y = AdamState.for_network(y_net, config.beta1, config.beta2, config.eps)
    state_z = AdamState.for_network(z_net, config.beta1, config.beta2, config.eps)
    rng = stream.with_purpose(PURPOSE_SGD_Y).generator()
    scale = 2.0 / config.batch
    for it in range(config.iterations):
        idx = rng.integers(0, m, size=config.batch)
        xb = outer_inputs[idx]
        acts_y = _forward_cached(y_net, xb)
        acts_z = _forward_cached(z_net, xb)
        pred_y = acts_y[-1][:, 0]
        pred_z = acts_z[-1]
        dwb = increments[idx]
        fval = problem.generator(t_i, x_outer[idx], pred_y, pred_z)
        if not np.isfinite(fval).all():
            bad = int(idx[np.argwhere(~np.isfinite(fval))[0][0]])
            raise FloatingPointError(f"non-finite generator output at sample {bad}, step {stream.step}")
        resid = pred_y - y_next_vals[idx] - h * fval + np.sum(pred_z * dwb, axis=1)
        if config.stop_gradient_generator:
            coup_y = np.ones_like(resid)
            coup_z = dwb
        else:
            coup_y = 1.0 - h * _generator_dy(problem, t_i, x_outer[idx], pred_y, pred_z)
            coup_z = dwb - h * _generator_dz(problem, t_i, x_outer[idx], pred_y, pred_z)
        grads_y = backward_from_cache(y_net, acts_y, (scale * resid * coup_y)[:, None])
        grads_z = backward_from_cache(z_net, acts_z, scale * resid[:, None] * coup_z)
        lr_t = _step_lr(config, it)
        adam_update(state_y, y_net, grads_y, lr_t)
        adam_update(state_z, z_net, grads_z, lr_t)
    if record is not None:
        record["final_loss"] = _dbdp1_loss(y_net, z_net, outer_inputs, y_next_vals, increments, problem, t_i, h)
    return y_net, z_net


def dbdp1_solve(problem: ProblemSpec, grid: TimeGrid, config: TrainConfig, stream: RngStream) -> SolveResult:
    """Backward induction with the pathwise per-step loss (no branching)."""
    n = grid.steps
    solution = SchemeSolution(
        scheme="dbdp1", grid=grid, problem=problem, y_nets=[None] * n, z_nets=[None] * n
    )
    records: List[Optional[StepRecord]] = [None] * n
    ensemble = None
    for i in range(n - 1, -1, -1):
        if ensemble is None or config.resample_outer:
            key = stream.with_step(i if config.resample_outer else 0)
            ensemble = simulate_forward(problem, grid, config.outer, key.with_purpose(PURPOSE_OUTER))
        y_next_vals = solution.evaluate_y(i + 1, ensemble.states[:, i + 1])
        inputs = _time_inputs(grid.node(i), ensemble.states[:, i])
        rec = {}
        y_net, z_net = dbdp1_step(
            inputs, y_next_vals, ensemble.increments[:, i], problem, grid.node(i), grid.h,
            config, stream.with_step(i),
            warm_y=solution.y_nets[i + 1] if i + 1 < n else None,
            warm_z=solution.z_nets[i + 1] if i + 1 < n else None,
            record=rec,
        )
        solution.y_nets[i] = y_net
        solution.z_nets[i] = z_net
        records[i] = StepRecord(
            step=i,
            z_initial=rec["initial_loss"],
            z_final=rec["final_loss"],
            y_initial=rec["initial_loss"],
            y_final=rec["final_loss"],
        )
    estimate = float(solution.evaluate_y(0, problem.x0[None, :])[0])
    return SolveResult(solution=solution, estimate=estimate, step_records=tuple(records), ensemble=ensemble)


SOLVERS = {"dbr": dbr_solve, "dbdp1": dbdp1_solve, "rdbr": rdbr_solve}
