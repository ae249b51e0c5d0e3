"""Shared domain types: time grid, problem coefficients, run statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps of size h = T/N."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be a finite positive real, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    def node(self, i: int) -> float:
        """Time at node i, t_i = i * h for i = 0..N."""
        if not 0 <= i <= self.steps:
            raise IndexError(f"node index {i} outside 0..{self.steps}")
        return i * self.h

    def nodes(self) -> Array:
        return np.arange(self.steps + 1) * self.h


@dataclass(frozen=True)
class AnalyticSolution:
    """Closed-form solution u(t, x) and, optionally, its scaled gradient sigma^T grad u.

    Both callables are vectorized: u(t, X) maps an (B, d) batch to (B,),
    z(t, X) maps to (B, d).
    """

    u: Callable[[float, Array], Array]
    z: Optional[Callable[[float, Array], Array]] = None

    def value_at(self, t: float, x) -> float:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        return float(self.u(t, pts)[0])


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients of one semilinear PDE / FBSDE instance (scalar solution).

    All coefficient callables are vectorized over a batch of states:

    - ``drift(t, X)``      with X of shape (B, d) returns (B, d)
    - ``diffusion(t, X)``  returns the full matrix field (B, d, d)
    - ``generator(t, X, Y, Z)`` with Y (B,), Z (B, d) returns (B,)
    - ``terminal(X)``      returns (B,)

    ``diffusion_matvec`` is an optional fast path computing
    sigma(t, X) @ V without materializing (B, d, d); V may carry extra
    middle axes, e.g. (B, K, d). ``generator_dy`` / ``generator_dz`` are
    optional analytic partials of the generator in y and z; training falls
    back to central finite differences when they are absent.
    """

    name: str
    dim: int
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    generator: Callable[[float, Array, Array, Array], Array]
    terminal: Callable[[Array], Array]
    x0: Array
    has_obstacle: bool = False
    obstacle: Optional[Callable[[Array], Array]] = None
    analytic: Optional[AnalyticSolution] = None
    diffusion_matvec: Optional[Callable[[float, Array, Array], Array]] = None
    generator_dy: Optional[Callable[[float, Array, Array, Array], Array]] = None
    generator_dz: Optional[Callable[[float, Array, Array, Array], Array]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim,):
            raise ValueError(f"x0 must have shape ({self.dim},), got {x0.shape}")
        if not np.isfinite(x0).all():
            raise ValueError("x0 must be finite")
        object.__setattr__(self, "x0", x0)
        if self.has_obstacle and self.obstacle is None:
            object.__setattr__(self, "obstacle", self.terminal)

    def sigma_dot(self, t: float, X: Array, V: Array) -> Array:
        """Apply sigma(t, X) to increment vectors V; V is (B, d) or (B, K, d)."""
        if self.diffusion_matvec is not None:
            return self.diffusion_matvec(t, X, V)
        sig = self.diffusion(t, X)
        if V.ndim == 2:
            return np.einsum("bij,bj->bi", sig, V)
        return np.einsum("bij,bkj->bki", sig, V)


@dataclass(frozen=True)
class SummaryStats:
    """Aggregate of repeated runs: the four reported accuracy columns."""

    mean: float
    std: float
    mae: float
    rel_err: float


@dataclass(frozen=True)
class RunReport:
    """Outcome of one independent repetition of a solve."""

    run: int
    seed: int
    estimate: float
    seconds: float
    initial_losses_y: tuple = ()
    final_losses_y: tuple = ()
    initial_losses_z: tuple = ()
    final_losses_z: tuple = ()
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def relative_error(estimate_mean: float, truth: float) -> float:
    """|truth - estimate_mean| / |truth|; undefined (raises) for truth = 0."""
    if truth == 0:
        raise ValueError("relative error undefined for zero reference value")
    return abs(truth - estimate_mean) / abs(truth)


def summarize(estimates, truth: float) -> SummaryStats:
    """Mean, sample std (n-1), mean absolute error and relative error of runs.

    A single estimate reports std = 0. The relative error is taken on the
    mean of the estimates.
    """
    vals = np.asarray(list(estimates), dtype=float)
    if vals.size == 0:
        raise ValueError("summarize requires at least one estimate")
    mean = float(vals.mean())
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    mae = float(np.abs(truth - vals).mean())
    return SummaryStats(mean=mean, std=std, mae=mae, rel_err=relative_error(mean, truth))
