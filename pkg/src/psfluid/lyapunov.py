"""Lyapunov-function candidates for PS fluid models with routing and impatience.

The routed model has per-class arrivals ``lambda_i``, service rates ``mu_i``,
impatience rates ``nu_i`` and a substochastic routing matrix ``P``; its drift

    z_i' = lambda_i + sum_j P_ji mu_j z_j / |z| - mu_i z_i / |z| - nu_i z_i

contains the tandem model as the case ``P_{i,i+1} = 1``, arrivals only into
class 1, and a common ``nu``.  Functions here accept a single state of shape
``(I,)`` or a batch of shape ``(N, I)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ModelError, ModelParams, NoConvergence, ScenarioConfig, fmt


class NonpositiveCoordinate(ModelError):
    pass


class MissingWeights(ModelError):
    pass


class WrongDimension(ModelError):
    pass


@dataclass(frozen=True)
class RoutedModelParams:
    lambda_vec: np.ndarray
    mu: np.ndarray
    nu_vec: np.ndarray
    routing: np.ndarray

    def __post_init__(self) -> None:
        lam = np.asarray(self.lambda_vec, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        nu = np.asarray(self.nu_vec, dtype=float)
        P = np.asarray(self.routing, dtype=float)
        n = mu.size
        if n == 0 or lam.shape != (n,) or nu.shape != (n,) or P.shape != (n, n):
            raise WrongDimension(
                f"inconsistent sizes: lambda {lam.shape}, mu {mu.shape}, nu {nu.shape}, P {P.shape}"
            )
        if np.any(lam < 0) or not np.any(lam > 0):
            raise ModelError("arrival rates must be >= 0 with at least one positive")
        if np.any(mu <= 0) or np.any(nu <= 0):
            raise ModelError("service and impatience rates must be positive")
        if np.any(P < 0) or np.any(P.sum(axis=1) > 1.0 + 1e-12):
            raise ModelError("routing matrix must be nonnegative with row sums <= 1")
        for name, arr in (("lambda_vec", lam), ("mu", mu), ("nu_vec", nu), ("routing", P)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def stages(self) -> int:
        return self.mu.size

    @classmethod
    def tandem(cls, params: ModelParams) -> "RoutedModelParams":
        n = params.stages
        lam = np.zeros(n)
        lam[0] = params.lam
        return cls(lam, np.array(params.mu), np.full(n, params.nu), np.eye(n, k=1))

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "RoutedModelParams":
        """Routed parameters from a scenario; missing keys fall back to the tandem model."""
        base = cls.tandem(config.params)
        n = base.stages
        lam = base.lambda_vec if config.lambda_vec is None else np.array(config.lambda_vec)
        nu = base.nu_vec if config.nu_vec is None else np.array(config.nu_vec)
        if config.routing is None:
            P = base.routing
        else:
            P = np.array(config.routing, dtype=float)
            if P.size == 1 and float(P.reshape(-1)[0]) == 0.0:
                P = np.zeros((n, n))
        return cls(lam, base.mu, nu, P)


@dataclass(frozen=True)
class LyapunovConfig:
    q: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.q is not None:
            if len(self.q) != 2 or any(not v > 0 for v in self.q):
                raise ModelError(f"q must be two positive weights, got {self.q}")


def routed_fluid_rhs(params: RoutedModelParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    norm = z.sum(axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    flow = np.where(norm > 0, params.mu * z / safe, 0.0)
    return params.lambda_vec + flow @ params.routing - flow - params.nu_vec * z


def routed_invariant_point(
    params: RoutedModelParams,
    damping: float = 0.5,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Damped fixed-point iteration on ``z_i = (lambda_i + inflow_i) / (mu_i/|z| + nu_i)``."""
    z = np.asarray(params.lambda_vec / params.nu_vec, dtype=float)
    z = np.maximum(z, 1e-3 * z.max())
    for _ in range(max_iter):
        norm = z.sum()
        inflow = (params.mu * z / norm) @ params.routing
        target = (params.lambda_vec + inflow) / (params.mu / norm + params.nu_vec)
        nxt = (1.0 - damping) * z + damping * target
        if np.abs(nxt - z).max() <= tol * max(1.0, np.abs(nxt).max()):
            return nxt
        z = nxt
    raise NoConvergence(f"routed invariant point not found in {max_iter} iterations")


def _positive(z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise NonpositiveCoordinate(f"{name} must have strictly positive coordinates")
    return z


def entropy_value(z, z_star) -> np.ndarray | float:
    """``sum_i z_i ln((z_i/|z|) / (z*_i/|z*|))``."""
    z = _positive(z, "z")
    zs = _positive(z_star, "z_star")
    p = z / z.sum(axis=-1, keepdims=True)
    out = (z * np.log(p / (zs / zs.sum()))).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def quadratic_value(z, z_star, mu) -> np.ndarray | float:
    """``sum_i (z_i - z*_i)^2 / (mu_i z*_i / |z*|)``."""
    zs = _positive(z_star, "z_star")
    z = np.asarray(z, dtype=float)
    w = np.asarray(mu, dtype=float) * zs / zs.sum()
    out = ((z - zs) ** 2 / w).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class Candidate:
    """A Lyapunov candidate with an analytic gradient."""

    name = "candidate"
    needs_positive = False

    def value(self, z):
        raise NotImplementedError

    def gradient(self, z) -> np.ndarray:
        raise NotImplementedError


@dataclass
class EntropyCandidate(Candidate):
    z_star: np.ndarray
    name = "entropy"
    needs_positive = True

    def value(self, z):
        return entropy_value(z, self.z_star)

    def gradient(self, z) -> np.ndarray:
        z = _positive(z, "z")
        zs = np.asarray(self.z_star, dtype=float)
        return np.log((z / z.sum(axis=-1, keepdims=True)) / (zs / zs.sum()))


@dataclass
class QuadraticCandidate(Candidate):
    z_star: np.ndarray
    mu: np.ndarray
    name = "quadratic"

    def value(self, z):
        return quadratic_value(z, self.z_star, self.mu)

    def gradient(self, z) -> np.ndarray:
        zs = _positive(self.z_star, "z_star")
        w = np.asarray(self.mu, dtype=float) * zs / zs.sum()
        return 2.0 * (np.asarray(z, dtype=float) - zs) / w


def two_class_alpha(params: RoutedModelParams, config: LyapunovConfig) -> np.ndarray:
    if params.stages != 2:
        raise WrongDimension(f"the two-class candidate needs I = 2, got {params.stages}")
    if config.q is None:
        raise MissingWeights("the two-class candidate needs weights q1, q2")
    P, mu, q = params.routing, params.mu, np.asarray(config.q, dtype=float)
    return np.array([
        1.0 / (((1.0 - P[i, i]) * mu[i] + P[1 - i, i] * mu[1 - i]) * q[i]) for i in range(2)
    ])


@dataclass
class TwoClassCandidate(Candidate):
    alpha: np.ndarray
    z_star: np.ndarray
    name = "two_class"

    def value(self, z):
        out = (self.alpha * (np.asarray(z, dtype=float) - self.z_star) ** 2).sum(axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def gradient(self, z) -> np.ndarray:
        return 2.0 * self.alpha * (np.asarray(z, dtype=float) - self.z_star)


def two_class_quadratic(params: RoutedModelParams, config: LyapunovConfig, z, z_star=None) -> float:
    """``alpha_1 (z_1 - z*_1)^2 + alpha_2 (z_2 - z*_2)^2`` with routing-dependent ``alpha``."""
    alpha = two_class_alpha(params, config)
    zs = routed_invariant_point(params) if z_star is None else np.asarray(z_star, dtype=float)
    return TwoClassCandidate(alpha, zs).value(z)


def make_candidate(
    kind: str, params: RoutedModelParams, z_star=None, config: LyapunovConfig | None = None
) -> Candidate:
    zs = routed_invariant_point(params) if z_star is None else np.asarray(z_star, dtype=float)
    if kind == "entropy":
        return EntropyCandidate(zs)
    if kind == "quadratic":
        return QuadraticCandidate(zs, params.mu)
    if kind == "two_class":
        return TwoClassCandidate(two_class_alpha(params, config or LyapunovConfig()), zs)
    raise ModelError(f"unknown candidate {kind!r}")


def flow_derivative(candidate: Candidate, params: RoutedModelParams, z):
    """``grad L(z) . routed_fluid_rhs(z)``."""
    z = _positive(z, "z")
    out = (candidate.gradient(z) * routed_fluid_rhs(params, z)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def fd_gradient(candidate: Candidate, z, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences with step ``rel_step * |z|_1``."""
    z = np.asarray(z, dtype=float)
    h = rel_step * z.sum()
    out = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        out[i] = (candidate.value(z + e) - candidate.value(z - e)) / (2.0 * h)
    return out


@dataclass
class ScanReport:
    states: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray
    threshold: float

    @property
    def samples(self) -> int:
        return len(self.derivatives)

    @property
    def violations(self) -> np.ndarray:
        return self.derivatives > self.threshold

    @property
    def violation_count(self) -> int:
        return int(self.violations.sum())

    @property
    def max_derivative(self) -> float:
        return float(self.derivatives.max()) if self.samples else float("nan")

    def summary(self) -> dict:
        return {
            "samples": self.samples,
            "violations": self.violation_count,
            "max_derivative": self.max_derivative,
            "threshold": self.threshold,
        }

    def write_csv(self, path: str | Path) -> None:
        stages = self.states.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_idx"] + [f"z{i + 1}" for i in range(stages)] + ["L", "dLdt", "violation_flag"])
            for k in range(self.samples):
                w.writerow(
                    [k] + [fmt(v) for v in self.states[k]]
                    + [fmt(self.values[k]), fmt(self.derivatives[k]), int(self.violations[k])]
                )


def sign_scan(
    candidate: Candidate,
    params: RoutedModelParams,
    box,
    samples: int,
    seed: int,
    min_norm: float = 0.0,
    threshold: float = 1e-12,
) -> ScanReport:
    """Sample states uniformly in a box of ``(0, inf)^I`` and record flow derivatives.

    ``box`` is ``(lo, hi)`` applied to every coordinate, or ``I`` pairs
    ``(lo_i, hi_i)``.  States with ``|z|_1 < min_norm`` are rejected and
    redrawn.
    """
    stages = params.stages
    bounds = np.asarray(box, dtype=float).reshape(-1, 2)
    if bounds.shape[0] == 1:
        bounds = np.repeat(bounds, stages, axis=0)
    if bounds.shape[0] != stages or np.any(bounds[:, 0] < 0) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ModelError(f"scan box must be (lo, hi) pairs in [0, inf) for {stages} coordinates")
    if min_norm > bounds[:, 1].sum():
        raise ModelError("min_norm exceeds every state in the box")
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, width = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    kept: list[np.ndarray] = []
    have = 0
    while have < samples:
        # 1 - U lies in (0, 1], so samples avoid the lower face of the box.
        draw = lo + width * (1.0 - rng.random((max(samples - have, 64), stages)))
        draw = draw[draw.sum(axis=1) >= min_norm][: samples - have]
        kept.append(draw)
        have += len(draw)
    states = np.concatenate(kept) if kept else np.zeros((0, stages))
    if samples == 0:
        return ScanReport(states, np.zeros(0), np.zeros(0), threshold)
    values = np.asarray(candidate.value(states), dtype=float).reshape(-1)
    deriv = np.asarray(flow_derivative(candidate, params, states), dtype=float).reshape(-1)
    return ScanReport(states, values, deriv, threshold)
