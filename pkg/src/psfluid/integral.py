"""Integral description of fluid model solutions.

A fluid trajectory ``z`` satisfies, for every stage ``i`` and time ``t``,

    z_i(t) = sum_{j<=i} z_j(0) P{B_j^{i-1} <= S(t) < B_j^i, D > t}
             + lam * int_0^t P{B_1^{i-1} <= S(t) - S(s) < B_1^i, D > t - s} ds

with the service clock ``S(t) = int_0^t du / |z(u)|_1``.  This module
evaluates the right-hand side on a trajectory grid, so that an ODE solution
can be checked against it, and solves the scalar norm equation from the
empty state by Picard iteration.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelError, ModelParams, NoConvergence, Trajectory, fmt, time_grid
from .phasetype import HypoExp, survival


class ZeroNormInterior(ModelError):
    pass


@dataclass(frozen=True)
class ClockTransform:
    times: np.ndarray
    cumulative: np.ndarray


def _clock(times: np.ndarray, norms: np.ndarray) -> np.ndarray:
    if np.any(norms[1:] <= 0.0):
        k = int(np.argmax(norms[1:] <= 0.0)) + 1
        raise ZeroNormInterior(f"|z(t)|_1 = 0 at interior grid time t={times[k]!r}")
    dt = np.diff(times)
    inv = np.empty_like(norms)
    inv[1:] = 1.0 / norms[1:]
    if norms[0] > 0.0:
        inv[0] = 1.0 / norms[0]
        panels = 0.5 * dt * (inv[:-1] + inv[1:])
    else:
        # Empty start: the first panel uses its right endpoint only.
        panels = 0.5 * dt * (inv[:-1] + inv[1:])
        panels[0] = dt[0] * inv[1]
    return np.concatenate([[0.0], np.cumsum(panels)])


def clock_transform(traj: Trajectory) -> ClockTransform:
    """Cumulative trapezoid integral of ``1/|z(u)|_1`` on the trajectory grid."""
    return ClockTransform(traj.times, _clock(traj.times, traj.norms()))


def _trapezoid_weights(times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower-triangle pairs ``(n, m)``, ``m <= n``, with trapezoid weights over ``[0, t_n]``."""
    n_idx, m_idx = np.tril_indices(len(times))
    dt = np.diff(times)
    left = np.concatenate([[0.0], dt])     # t_m - t_{m-1}
    right = np.concatenate([dt, [0.0]])    # t_{m+1} - t_m
    w = 0.5 * (np.where(m_idx > 0, left[m_idx], 0.0) + np.where(m_idx < n_idx, right[m_idx], 0.0))
    w[n_idx == 0] = 0.0
    return n_idx, m_idx, w


@dataclass
class _Convolver:
    """Evaluates ``int_0^t F(S(t) - S(s)) e^{-nu (t-s)} ds`` for every grid ``t``."""

    times: np.ndarray
    nu: float
    pairs: tuple = field(init=False)

    def __post_init__(self) -> None:
        self.pairs = _trapezoid_weights(self.times)

    def __call__(self, clock: np.ndarray, hypos: list[HypoExp]) -> list[np.ndarray]:
        n_idx, m_idx, w = self.pairs
        tau = clock[n_idx] - clock[m_idx]
        kern = w * np.exp(-self.nu * (self.times[n_idx] - self.times[m_idx]))
        out = []
        for h in hypos:
            vals = kern * survival(h, tau)
            out.append(np.bincount(n_idx, weights=vals, minlength=len(self.times)))
        return out


def _service_prefixes(params: ModelParams, start: int) -> list[HypoExp]:
    """``B_start^{start-1}, B_start^start, ..., B_start^I`` (1-based ``start``)."""
    return [HypoExp(params.mu[start - 1:i]) for i in range(start - 1, params.stages + 1)]


def integral_rhs_all(params: ModelParams, traj: Trajectory) -> np.ndarray:
    """Right-hand side of the integral equations at every grid time and stage, shape ``(N, I)``."""
    clock = clock_transform(traj).cumulative
    times = traj.times
    stages = params.stages
    z0 = traj.states[0]
    decay = np.exp(-params.nu * times)
    out = np.zeros((len(times), stages))
    for j in range(1, stages + 1):
        if z0[j - 1] == 0.0:
            continue
        surv = [np.asarray(survival(h, clock)) for h in _service_prefixes(params, j)]
        # surv[k] is P{B_j^{j-1+k} > S(t)}; stage i = j-1+k uses the band k-1 -> k.
        for k in range(1, len(surv)):
            out[:, j - 2 + k] += z0[j - 1] * (surv[k] - surv[k - 1]) * decay
    conv = _Convolver(times, params.nu)
    surv = conv(clock, _service_prefixes(params, 1))
    for i in range(1, stages + 1):
        out[:, i - 1] += params.lam * (surv[i] - surv[i - 1])
    return out


def integral_rhs(params: ModelParams, traj: Trajectory, i: int, t: float) -> float:
    """Stage-``i`` (1-based) right-hand side at grid time ``t``."""
    if not 1 <= i <= params.stages:
        raise ModelError(f"stage index {i} out of range 1..{params.stages}")
    hits = np.nonzero(np.isclose(traj.times, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))[0]
    if hits.size == 0:
        raise ModelError(f"t={t!r} is not on the trajectory grid")
    n = int(hits[0])
    sub = Trajectory(traj.times[: n + 1], traj.states[: n + 1])
    return float(integral_rhs_all(params, sub)[n, i - 1])


def norm_integral_rhs(params: ModelParams, traj: Trajectory) -> np.ndarray:
    """The summed equation for ``|z(t)|_1``, evaluated directly (not by summing stages)."""
    clock = clock_transform(traj).cumulative
    times = traj.times
    z0 = traj.states[0]
    total = np.zeros(len(times))
    for j in range(1, params.stages + 1):
        if z0[j - 1] != 0.0:
            total += z0[j - 1] * np.asarray(survival(HypoExp(params.mu[j - 1:]), clock))
    total *= np.exp(-params.nu * times)
    conv = _Convolver(times, params.nu)
    total += params.lam * conv(clock, [HypoExp(params.mu)])[0]
    return total


def representation_residual(params: ModelParams, traj: Trajectory) -> float:
    """``max_{t, i} |z_i(t) - rhs_i(t)|`` over the grid."""
    return float(np.abs(traj.states - integral_rhs_all(params, traj)).max())


def residual_rows(params: ModelParams, traj: Trajectory) -> list[tuple[float, int, float, float, float]]:
    rhs = integral_rhs_all(params, traj)
    rows = []
    for n, t in enumerate(traj.times):
        for i in range(params.stages):
            z = traj.states[n, i]
            rows.append((float(t), i + 1, float(z), float(rhs[n, i]), abs(float(z - rhs[n, i]))))
    return rows


def write_residual_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "stage", "z_ode", "z_integral", "abs_err"])
        for t, i, z, r, e in rows:
            w.writerow([fmt(t), i, fmt(z), fmt(r), fmt(e)])


def convergence_order(errors, steps) -> list[float]:
    """Observed orders ``log(e_k / e_{k+1}) / log(h_k / h_{k+1})``."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(steps, dtype=float)
    return list(np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:]))


def _panel_clock(h: float, xa, xb, theta):
    """``int_{s}^{s_b} du / x(u)`` for ``x`` linear on a panel of width ``h``.

    ``s = s_a + theta * h``; falls back to the constant-``x`` limit when
    the endpoint values coincide.
    """
    d = xb - xa
    flat = np.abs(d) <= 1e-12 * np.abs(xb)
    safe = np.where(flat, 1.0, d)
    xs = xa + theta * d
    return np.where(flat, h * (1.0 - theta) / xb, h * np.log(xb / xs) / safe)


@dataclass
class PicardResult:
    trajectory: Trajectory
    iterations: int
    differences: list[float]


class _EmptyStartNormMap:
    """One application of the norm equation's right-hand side, started empty.

    The uniform grid carries ``x``; between grid points ``x`` is taken as
    linear, which makes the clock exact per panel (a log-mean).  Panels
    ``[s_m, s_{m+1}]`` with ``m >= 1`` use Gauss-Legendre nodes; on the first
    panel ``x(u) = x_1 u / h`` makes the clock ``(h / x_1) ln(h / s)``, and
    the substitution ``s = h e^{-w}`` turns it into a Gauss-Laguerre integral.
    """

    def __init__(self, params: ModelParams, times: np.ndarray, legendre: int = 4, laguerre: int = 40):
        self.params = params
        self.times = times
        self.h = float(times[1] - times[0])
        self.service = HypoExp(params.mu)
        nodes, weights = np.polynomial.legendre.leggauss(legendre)
        self.theta = 0.5 * (nodes + 1.0)
        self.theta_w = 0.5 * weights
        self.lag_x, self.lag_w = np.polynomial.laguerre.laggauss(laguerre)
        n_idx, m_idx = np.tril_indices(len(times), -1)
        keep = m_idx >= 1
        self.n_idx, self.m_idx = n_idx[keep], m_idx[keep]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h, nu, times = self.h, self.params.nu, self.times
        n_idx, m_idx = self.n_idx, self.m_idx
        panels = _panel_clock(h, x[1:-1], x[2:], 0.0)
        clock = np.concatenate([[np.nan, 0.0], np.cumsum(panels)])  # relative to t_1
        base = clock[n_idx] - clock[m_idx + 1]
        xa, xb = x[m_idx], x[m_idx + 1]
        out = np.zeros(len(times))
        for th, wt in zip(self.theta, self.theta_w):
            tau = base + _panel_clock(h, xa, xb, th)
            kern = np.exp(-nu * (times[n_idx] - times[m_idx] - th * h))
            out += np.bincount(
                n_idx, weights=h * wt * kern * survival(self.service, tau), minlength=len(times)
            )
        tau = clock[1:, None] + (h / x[1]) * self.lag_x[None, :]
        kern = np.exp(-nu * (times[1:, None] - h * np.exp(-self.lag_x)[None, :]))
        out[1:] += h * (survival(self.service, tau) * kern) @ self.lag_w
        return self.params.lam * out


def norm_fixed_point_iteration(
    params: ModelParams,
    horizon: float,
    step: float,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> PicardResult:
    """Picard iteration for the norm of the fluid solution started empty.

    Iterates ``x <- lam * int_0^t P{B_1^I > int_s^t du/x(u), D > t-s} ds``
    from ``x(t) = lam * t`` until successive iterates differ by less than
    ``tol`` in sup-norm.
    """
    params.require_overload()
    times = time_grid(horizon, step)
    if len(times) < 3:
        raise ModelError("Picard iteration needs at least two grid steps")
    step_map = _EmptyStartNormMap(params, times)
    x = params.lam * times
    diffs: list[float] = []
    for k in range(1, max_iter + 1):
        nxt = step_map(x)
        diffs.append(float(np.abs(nxt - x).max()))
        x = nxt
        if diffs[-1] < tol:
            return PicardResult(Trajectory(times, x[:, None]), k, diffs)
    raise NoConvergence(
        f"Picard iteration did not converge in {max_iter} iterations (last change {diffs[-1]!r})"
    )
