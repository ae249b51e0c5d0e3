"""Benchmark PDE instances with analytic solutions, a linear sanity toy, and
an American-put obstacle problem with a binomial-tree pricing oracle.

Problems are selected by string id: ``example1``, ``example2``,
``linear_toy``, ``american_put``.
"""

from __future__ import annotations

import math

import numpy as np

from .core import AnalyticSolution, ProblemSpec

Array = np.ndarray

PROBLEM_IDS = ("example1", "example2", "linear_toy", "american_put")


def _sigmoid(v: Array) -> Array:
    # branch on sign to stay overflow-free in both tails
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# -- Example 1: bounded sigmoid solution, diffusion d * I ---------------------


def _example1_fields(t: float, X: Array, d: int, horizon: float = 1.0):
    """Analytic u and its derivatives for the sigmoid benchmark."""
    del horizon  # solution does not involve the horizon away from t = T
    xbar = X.mean(axis=1)
    u = _sigmoid(t + xbar)
    u1 = u * (1.0 - u)  # first derivative of the sigmoid at t + xbar
    u2 = u1 * (1.0 - 2.0 * u)
    return {
        "u": u,
        "u_t": u1,
        "grad": np.repeat((u1 / d)[:, None], d, axis=1),
        "laplacian": u2 / d,
    }


def example1_analytic(t: float, x, d: int) -> float:
    """Closed-form solution of the sigmoid benchmark at a single point."""
    X = np.asarray(x, dtype=float).reshape(1, d)
    return float(_example1_fields(t, X, d)["u"][0])


def example1(d: int, horizon: float = 1.0) -> ProblemSpec:
    """Bounded-solution benchmark: zero drift, diffusion d*I, sigmoid data."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    c = (d + 2) / (2.0 * d)
    dd = float(d)
    eye = np.eye(d)

    def drift(t, X):
        return np.zeros_like(X)

    def diffusion(t, X):
        return np.broadcast_to(dd * eye, (X.shape[0], d, d))

    def diffusion_matvec(t, X, V):
        return dd * V

    def generator(t, X, Y, Z):
        return -(Y - c) * Z.sum(axis=-1)

    def generator_dy(t, X, Y, Z):
        return -Z.sum(axis=-1)

    def generator_dz(t, X, Y, Z):
        return np.repeat(-(Y - c)[:, None], d, axis=1)

    def terminal(X):
        return _sigmoid(horizon + X.mean(axis=1))

    def u(t, X):
        return _example1_fields(t, X, d)["u"]

    def z(t, X):
        # sigma^T grad u = d * grad u = u(1-u) * 1_d
        f = _example1_fields(t, X, d)
        return dd * f["grad"]

    return ProblemSpec(
        name="example1",
        dim=d,
        drift=drift,
        diffusion=diffusion,
        diffusion_matvec=diffusion_matvec,
        generator=generator,
        generator_dy=generator_dy,
        generator_dz=generator_dz,
        terminal=terminal,
        x0=np.zeros(d),
        analytic=AnalyticSolution(u=u, z=z),
    )


def example1_residual(t: float, X: Array, d: int, horizon: float = 1.0) -> Array:
    """Residual of the analytic solution under the implemented coefficients."""
    prob = example1(d, horizon)
    f = _example1_fields(t, X, d, horizon)
    z = d * f["grad"]
    lhs = f["u_t"] + 0.5 * d * d * f["laplacian"]
    return lhs - prob.generator(t, X, f["u"], z)


# -- Example 2: unbounded piecewise solution, diffusion I / sqrt(d) -----------


def _example2_fields(t: float, X: Array, d: int, horizon: float = 1.0):
    """Analytic u and its derivatives for the piecewise sin/linear benchmark."""
    neg = X < 0
    s = np.where(neg, np.sin(X), X)
    s1 = np.where(neg, np.cos(X), 1.0)
    s2 = np.where(neg, -np.sin(X), 0.0)
    w = np.arange(1, d + 1, dtype=float)
    phase = X @ w
    cosp, sinp = np.cos(phase), np.sin(phase)
    tail = (horizon - t) / d
    u = tail * s.sum(axis=1) + cosp
    grad = tail * s1 - np.outer(sinp, w)
    lap = tail * s2.sum(axis=1) - (w @ w) * cosp
    return {
        "u": u,
        "u_t": -s.sum(axis=1) / d,
        "grad": grad,
        "laplacian": lap,
    }


def example2_analytic(t: float, x, d: int) -> float:
    X = np.asarray(x, dtype=float).reshape(1, d)
    return float(_example2_fields(t, X, d)["u"][0])


def _khat_vec(t: float, X: Array, d: int, horizon: float = 1.0) -> Array:
    """Source term making the analytic u solve the PDE identically.

    Derived from the analytic derivatives:
    khat = u_t + laplacian/(2d) + (u/d) * sum_i du/dx_i + u^2 / 2.
    """
    f = _example2_fields(t, X, d, horizon)
    u = f["u"]
    return f["u_t"] + f["laplacian"] / (2.0 * d) + (u / d) * f["grad"].sum(axis=1) + 0.5 * u * u


def khat(t: float, x, d: int) -> float:
    X = np.asarray(x, dtype=float).reshape(1, d)
    return float(_khat_vec(t, X, d)[0])


def example2(d: int, horizon: float = 1.0) -> ProblemSpec:
    """Unbounded-solution benchmark: zero drift, diffusion I/sqrt(d)."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    coef = 1.0 / math.sqrt(d)
    sqrt_d = math.sqrt(d)
    eye = np.eye(d)
    w = np.arange(1, d + 1, dtype=float)

    def drift(t, X):
        return np.zeros_like(X)

    def diffusion(t, X):
        return np.broadcast_to(coef * eye, (X.shape[0], d, d))

    def diffusion_matvec(t, X, V):
        return coef * V

    def generator(t, X, Y, Z):
        return _khat_vec(t, X, d, horizon) - (Y / sqrt_d) * Z.sum(axis=-1) - 0.5 * Y * Y

    def generator_dy(t, X, Y, Z):
        return -Z.sum(axis=-1) / sqrt_d - Y

    def generator_dz(t, X, Y, Z):
        return np.repeat((-Y / sqrt_d)[:, None], d, axis=1)

    def terminal(X):
        return np.cos(X @ w)

    def u(t, X):
        return _example2_fields(t, X, d, horizon)["u"]

    def z(t, X):
        return coef * _example2_fields(t, X, d, horizon)["grad"]

    return ProblemSpec(
        name="example2",
        dim=d,
        drift=drift,
        diffusion=diffusion,
        diffusion_matvec=diffusion_matvec,
        generator=generator,
        generator_dy=generator_dy,
        generator_dz=generator_dz,
        terminal=terminal,
        x0=np.full(d, 0.5),
        analytic=AnalyticSolution(u=u, z=z),
    )


def example2_residual(t: float, X: Array, d: int, horizon: float = 1.0) -> Array:
    prob = example2(d, horizon)
    f = _example2_fields(t, X, d, horizon)
    z = f["grad"] / math.sqrt(d)
    lhs = f["u_t"] + f["laplacian"] / (2.0 * d)
    return lhs - prob.generator(t, X, f["u"], z)


# -- Linear sanity toy --------------------------------------------------------


def linear_toy(d: int) -> ProblemSpec:
    """Driver-free martingale toy: u(t, x) = sum(x), z = 1_d exactly."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    eye = np.eye(d)

    def drift(t, X):
        return np.zeros_like(X)

    def diffusion(t, X):
        return np.broadcast_to(eye, (X.shape[0], d, d))

    def diffusion_matvec(t, X, V):
        return V

    def zero_gen(t, X, Y, Z):
        return np.zeros_like(Y)

    def zero_dy(t, X, Y, Z):
        return np.zeros_like(Y)

    def zero_dz(t, X, Y, Z):
        return np.zeros_like(Z)

    return ProblemSpec(
        name="linear_toy",
        dim=d,
        drift=drift,
        diffusion=diffusion,
        diffusion_matvec=diffusion_matvec,
        generator=zero_gen,
        generator_dy=zero_dy,
        generator_dz=zero_dz,
        terminal=lambda X: X.sum(axis=1),
        x0=np.zeros(d),
        analytic=AnalyticSolution(
            u=lambda t, X: X.sum(axis=1),
            z=lambda t, X: np.ones_like(X),
        ),
    )


# -- American put under geometric Brownian motion -----------------------------


def american_put(s0: float, strike: float, rate: float, vol: float, horizon: float) -> ProblemSpec:
    """Obstacle problem for an American put; payoff doubles as the obstacle."""
    if s0 <= 0:
        raise ValueError(f"spot must be positive, got {s0}")
    if strike <= 0:
        raise ValueError(f"strike must be positive, got {strike}")
    if vol < 0:
        raise ValueError(f"volatility must be non-negative, got {vol}")
    if horizon <= 0:
        raise ValueError(f"maturity must be positive, got {horizon}")

    def drift(t, X):
        return rate * X

    def diffusion(t, X):
        return (vol * X)[:, :, None]

    def diffusion_matvec(t, X, V):
        coef = vol * X[:, 0]
        return V * coef.reshape((X.shape[0],) + (1,) * (V.ndim - 1))

    def generator(t, X, Y, Z):
        return -rate * Y

    def generator_dy(t, X, Y, Z):
        return np.full_like(Y, -rate)

    def generator_dz(t, X, Y, Z):
        return np.zeros_like(Z)

    def payoff(X):
        return np.maximum(strike - X[:, 0], 0.0)

    return ProblemSpec(
        name="american_put",
        dim=1,
        drift=drift,
        diffusion=diffusion,
        diffusion_matvec=diffusion_matvec,
        generator=generator,
        generator_dy=generator_dy,
        generator_dz=generator_dz,
        terminal=payoff,
        x0=np.array([s0]),
        has_obstacle=True,
        obstacle=payoff,
    )


def binomial_american_put(
    s0: float, strike: float, rate: float, vol: float, horizon: float, steps: int
) -> float:
    """Price an American put on a Cox-Ross-Rubinstein binomial tree.

    Parameters
    ----------
    s0 : float
        Spot price of the underlying.
    strike : float
        Strike price.
    rate : float
        Continuously compounded risk-free rate.
    vol : float
        Volatility of the underlying; vol = 0 degenerates to the best
        deterministic exercise over the grid.
    horizon : float
        Time to maturity in years.
    steps : int
        Number of tree steps.

    Returns
    -------
    float
        Option value with early exercise allowed at every node.
    """
    if s0 <= 0 or strike <= 0 or horizon <= 0 or vol < 0:
        raise ValueError("invalid contract parameters")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dt = horizon / steps
    if vol == 0.0:
        # deterministic spot: best exercise over the grid of the discounted payoff
        t = np.arange(steps + 1) * dt
        return float(np.max(np.exp(-rate * t) * np.maximum(strike - s0 * np.exp(rate * t), 0.0)))
    up = math.exp(vol * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(rate * dt) - down) / (up - down)
    disc = math.exp(-rate * dt)
    j = np.arange(steps + 1)
    spot = s0 * up**j * down ** (steps - j)
    values = np.maximum(strike - spot, 0.0)
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[1 : i + 2] + (1.0 - p) * values[: i + 1])
        j = np.arange(i + 1)
        spot = s0 * up**j * down ** (i - j)
        values = np.maximum(values, strike - spot)
    return float(values[0])


def get_problem(
    name: str,
    d: int,
    horizon: float = 1.0,
    s0: float = 36.0,
    strike: float = 40.0,
    rate: float = 0.06,
    vol: float = 0.2,
) -> ProblemSpec:
    """Build a benchmark problem by string id."""
    if name == "example1":
        return example1(d, horizon)
    if name == "example2":
        return example2(d, horizon)
    if name == "linear_toy":
        return linear_toy(d)
    if name == "american_put":
        if d != 1:
            raise ValueError("american_put is one-dimensional; set d = 1")
        return american_put(s0, strike, rate, vol, horizon)
    raise ValueError(f"unknown problem id {name!r}; known ids: {', '.join(PROBLEM_IDS)}")
