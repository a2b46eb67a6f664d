"""Differential fluid model of the multistage PS queue and its invariant point."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ModelParams,
    NoConvergence,
    StepTooLarge,
    Trajectory,
    as_state,
    bisect,
    l1_norm,
    time_grid,
)
from .phasetype import HypoExp, expected_min_scaled

ROOT_TOL = 1e-12


@dataclass(frozen=True)
class InvariantPoint:
    z_star: np.ndarray
    norm: float
    residual: float


def fluid_rhs(params: ModelParams, z) -> np.ndarray:
    """Fluid drift; the shares ``z_i / |z|`` are taken as 0 at the empty state."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(params.mu)
    norm = z.sum()
    flow = mu * z / norm if norm > 0 else np.zeros_like(z)
    dz = -flow - params.nu * z
    dz[0] += params.lam
    dz[1:] += flow[:-1]
    return dz


def norm_drift(params: ModelParams, z) -> float:
    """``d|z|/dt = lambda - mu_I z_I / |z| - nu |z|`` (only the last stage leaves by service)."""
    z = np.asarray(z, dtype=float)
    norm = z.sum()
    served = params.mu[-1] * z[-1] / norm if norm > 0 else 0.0
    return params.lam - served - params.nu * norm


def _rk4_step(params: ModelParams, z: np.ndarray, dt: float) -> np.ndarray:
    k1 = fluid_rhs(params, z)
    k2 = fluid_rhs(params, z + 0.5 * dt * k1)
    k3 = fluid_rhs(params, z + 0.5 * dt * k2)
    k4 = fluid_rhs(params, z + dt * k3)
    return z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    params: ModelParams,
    z0,
    horizon: float,
    step: float = 1e-3,
    substeps: int = 10,
) -> Trajectory:
    """Classical RK4 on the grid ``0, step, ..., horizon``.

    Each output interval is split into ``substeps`` RK4 steps.  Negative
    round-off is clamped to 0; the largest clamp relative to the norm is
    stored on the trajectory.  A step taken from the empty state is clamped
    without complaint and left out of that figure.
    """
    params.require_overload()
    z = as_state(z0, params.stages)
    times = time_grid(horizon, step)
    dt = step / substeps
    states = np.empty((len(times), params.stages))
    states[0] = z
    worst = 0.0
    for n in range(1, len(times)):
        for _ in range(substeps):
            from_empty = z.sum() == 0.0
            z = _rk4_step(params, z, dt)
            # The drift jumps at the empty state, so the first step from it may overshoot.
            if not np.all(np.isfinite(z)) or (z.min() < -1e-9 and not from_empty):
                raise StepTooLarge(
                    f"RK4 step {dt!r} produced an invalid state near t={times[n]!r}: {z.tolist()}"
                )
            if z.min() < 0.0:
                if not from_empty:
                    worst = max(worst, -z.min() / max(z.sum(), 1e-300))
                z = np.maximum(z, 0.0)
        states[n] = z
    return Trajectory(times, states, clamped=worst)


def continue_from(params: ModelParams, traj: Trajectory, extra: float, substeps: int = 10) -> Trajectory:
    """Extend a uniform-grid trajectory by ``extra`` time units."""
    step = traj.times[1] - traj.times[0]
    tail = integrate(params, traj.states[-1], extra, step, substeps)
    times = np.concatenate([traj.times, traj.times[-1] + tail.times[1:]])
    states = np.concatenate([traj.states, tail.states[1:]])
    return Trajectory(times, states, clamped=max(traj.clamped, tail.clamped))


def f_function(params: ModelParams, x: float) -> float:
    """``lambda * sum_i prod_{j<i} mu_j / prod_{j<=i} (mu_j + nu x)``; strictly decreasing."""
    total = 0.0
    term = 1.0
    for m in params.mu:
        term /= m + params.nu * x
        total += term
        term *= m
    return params.lam * total


def _bracket(decreasing, target: float = 1.0) -> float:
    hi = 1.0
    while decreasing(hi) >= target:
        hi *= 2.0
    return hi


def invariant_norm(params: ModelParams) -> float:
    """Unique ``x > 0`` with ``f(x) = 1``, by doubling then bisection."""
    params.require_overload()
    hi = _bracket(lambda x: f_function(params, x))
    return bisect(lambda x: f_function(params, x) - 1.0, 0.0, hi, ROOT_TOL)


def coordinates_from_norm(params: ModelParams, x: float) -> np.ndarray:
    z = np.empty(params.stages)
    z[0] = params.lam * x / (params.mu[0] + params.nu * x)
    for i in range(1, params.stages):
        z[i] = params.mu[i - 1] * z[i - 1] / (params.mu[i] + params.nu * x)
    return z


def invariant_point(params: ModelParams) -> InvariantPoint:
    x = invariant_norm(params)
    z = coordinates_from_norm(params, x)
    if abs(z.sum() - x) > 1e-10 * max(1.0, x):
        raise AssertionError(f"invariant coordinates sum to {z.sum()!r}, norm is {x!r}")
    drift = np.abs(fluid_rhs(params, z)).max()
    if drift > 1e-9 * max(1.0, params.lam):
        raise AssertionError(f"fluid drift at the invariant point is {drift!r}")
    return InvariantPoint(z_star=z, norm=x, residual=f_function(params, x) - 1.0)


def fixed_point_norm(params: ModelParams) -> float:
    """Solve ``x = lambda E min{x (B_1 + ... + B_I), D}`` by bisection.

    Written as ``lambda E min{x B, D} / x = 1``, whose left side decreases
    from ``lambda sum 1/mu_i`` to 0.
    """
    params.require_overload()
    service = HypoExp(params.mu)

    def ratio(x: float) -> float:
        if x == 0.0:
            return params.load
        return params.lam * expected_min_scaled(service, x, params.nu) / x

    hi = _bracket(ratio)
    return bisect(lambda x: ratio(x) - 1.0, 0.0, hi, ROOT_TOL)


def distance_to(traj: Trajectory, z_star) -> np.ndarray:
    return np.abs(traj.states - np.asarray(z_star)[None, :]).sum(axis=1)


def run_until_close(
    params: ModelParams,
    z0,
    tol: float = 1e-6,
    step: float = 1e-2,
    start: float = 1.0,
    max_horizon: float = 1e4,
    substeps: int = 10,
) -> Trajectory:
    """Integrate with doubling horizons until ``|z(T) - z*|_1 <= tol``."""
    z_star = invariant_point(params).z_star
    traj = integrate(params, z0, start, step, substeps)
    while l1_norm(traj.states[-1] - z_star) > tol:
        if traj.times[-1] >= max_horizon:
            raise NoConvergence(f"no convergence to the invariant point by T={max_horizon!r}")
        traj = continue_from(params, traj, min(traj.times[-1], max_horizon - traj.times[-1]), substeps)
    return traj
