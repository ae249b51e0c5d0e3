"""Seeded random streams, forward Euler path simulation and inner branch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .core import ProblemSpec, TimeGrid

Array = np.ndarray

# Purpose tags keying logically independent substreams of one run.
PURPOSE_OUTER = 0
PURPOSE_BRANCH = 1
PURPOSE_INIT_Z = 2
PURPOSE_INIT_Y = 3
PURPOSE_SGD_Z = 4
PURPOSE_SGD_Y = 5
PURPOSE_PROBE = 6


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by (seed, run, step, purpose).

    The same key always reproduces the same draws; distinct keys give
    statistically independent streams, so parallel generation never
    shares a stream.
    """

    seed: int
    run: int = 0
    step: int = 0
    purpose: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.run, self.step, self.purpose))
        return np.random.Generator(np.random.PCG64(ss))

    def with_step(self, step: int) -> "RngStream":
        return replace(self, step=step)

    def with_purpose(self, purpose: int) -> "RngStream":
        return replace(self, purpose=purpose)


@dataclass(frozen=True)
class PathEnsemble:
    """Outer Monte Carlo trajectories X[m, i] and their Brownian increments.

    states has shape (M, N+1, d), increments (M, N, d); every path starts
    at x0 and follows the explicit Euler recursion
    X[m, i+1] = X[m, i] + mu(t_i, X[m, i]) h + sigma(t_i, X[m, i]) dW[m, i].
    """

    states: Array
    increments: Array

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1


@dataclass(frozen=True)
class BranchBatch:
    """K fresh one-step transitions per outer sample at a fixed step i.

    increments and next_states have shape (M, K, d); the draws come from a
    stream disjoint from the outer-path stream.
    """

    step: int
    increments: Array
    next_states: Array

    @property
    def n_branches(self) -> int:
        return self.increments.shape[1]


def gaussian_increments(stream: RngStream, count: int, dim: int, h: float) -> Array:
    """Draw a (count, dim) array of independent N(0, h) Brownian increments."""
    if h < 0:
        raise ValueError(f"step size must be non-negative, got {h}")
    rng = stream.generator()
    return rng.standard_normal((count, dim)) * np.sqrt(h)


def simulate_forward(problem: ProblemSpec, grid: TimeGrid, n_paths: int, stream: RngStream) -> PathEnsemble:
    """Simulate the outer ensemble by the explicit Euler scheme.

    All N increment blocks are drawn from the single (run, outer) stream in
    step order, so the ensemble is bit-reproducible for a given stream key.
    """
    if n_paths < 1:
        raise ValueError(f"need at least one path, got {n_paths}")
    d, h = problem.dim, grid.h
    rng = stream.generator()
    dw = rng.standard_normal((n_paths, grid.steps, d)) * np.sqrt(h)
    states = np.empty((n_paths, grid.steps + 1, d))
    states[:, 0] = problem.x0
    for i in range(grid.steps):
        t = grid.node(i)
        x = states[:, i]
        nxt = x + problem.drift(t, x) * h + problem.sigma_dot(t, x, dw[:, i])
        if not np.isfinite(nxt).all():
            m = int(np.argwhere(~np.isfinite(nxt).all(axis=1))[0][0])
            raise FloatingPointError(f"non-finite state at path m={m}, step i={i + 1}")
        states[:, i + 1] = nxt
    return PathEnsemble(states=states, increments=dw)


def sample_branches(
    problem: ProblemSpec,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    i: int,
    n_branches: int,
    stream: RngStream,
) -> BranchBatch:
    """Draw K inner one-step transitions from every outer state at step i."""
    if not 0 <= i <= grid.steps - 1:
        raise IndexError(f"step index {i} outside 0..{grid.steps - 1}")
    if n_branches < 1:
        raise ValueError(f"need at least one branch, got {n_branches}")
    d, h = problem.dim, grid.h
    m = ensemble.n_paths
    rng = stream.generator()
    dw = rng.standard_normal((m, n_branches, d)) * np.sqrt(h)
    t = grid.node(i)
    x = ensemble.states[:, i]
    base = x + problem.drift(t, x) * h
    nxt = base[:, None, :] + problem.sigma_dot(t, x, dw)
    if not np.isfinite(nxt).all():
        raise FloatingPointError(f"non-finite branch state at step i={i}")
    return BranchBatch(step=i, increments=dw, next_states=nxt)


def write_paths_csv(ensemble: PathEnsemble, path) -> None:
    """Debug dump of an ensemble: one row per (m, i) with columns m,i,x_1..x_d."""
    d = ensemble.states.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "i"] + [f"x_{j + 1}" for j in range(d)])
        for m in range(ensemble.states.shape[0]):
            for i in range(ensemble.states.shape[1]):
                writer.writerow([m, i] + [f"{v:.12g}" for v in ensemble.states[m, i]])
