"""Closed-form job-probability metrics for the freelance model.

With a common freelancer rate ``mu`` the invariant point is geometric in
``u = mu / (mu + nu |z*|)``, which solves ``(lam/mu) sum_{i=1}^I u^i = 1``.
Class ``i`` (jobs holding ``i`` applications, ``i = 0..I-1``) then has mass
``(lam/nu) u^i (1-u)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ModelError, ModelParams, NotOverloaded, bisect, validate_params

U_TOL = 1e-14


@dataclass(frozen=True)
class FreelanceParams:
    lam: float
    mu: float
    nu: float
    limit: int

    def __post_init__(self) -> None:
        for name in ("lam", "mu", "nu"):
            v = float(getattr(self, name))
            if not v > 0 or not math.isfinite(v):
                raise ModelError(f"{name} must be positive and finite, got {v!r}")
            object.__setattr__(self, name, v)
        if int(self.limit) != self.limit or self.limit < 1:
            raise ModelError(f"application limit must be an integer >= 1, got {self.limit!r}")
        object.__setattr__(self, "limit", int(self.limit))

    @property
    def overloaded(self) -> bool:
        return self.lam * self.limit / self.mu > 1.0

    def require_overload(self) -> "FreelanceParams":
        if not self.overloaded:
            raise NotOverloaded(
                f"freelance model is not overloaded: lambda * I / mu = {self.lam * self.limit / self.mu!r} <= 1"
            )
        return self

    def as_model_params(self) -> ModelParams:
        """The equal-rate PS model with ``I`` stages of rate ``mu``."""
        return validate_params(ModelParams(self.lam, (self.mu,) * self.limit, self.nu))

    @classmethod
    def from_model_params(cls, params: ModelParams) -> "FreelanceParams":
        if any(m != params.mu[0] for m in params.mu):
            raise ModelError("the freelance model needs equal stage rates")
        return cls(params.lam, params.mu[0], params.nu, params.stages)


def solve_u(params: FreelanceParams) -> float:
    params.require_overload()
    ratio = params.lam / params.mu
    powers = np.arange(1, params.limit + 1)

    def g(u: float) -> float:
        return ratio * float(np.sum(u ** powers)) - 1.0

    return bisect(g, 0.0, 1.0, U_TOL)


def u_infinity(lam: float, mu: float) -> float:
    return mu / (lam + mu)


def geometric_invariant(params: FreelanceParams, u: float | None = None) -> np.ndarray:
    """``z_i* = (lam/nu) u^i (1-u)`` for ``i = 0..I-1``."""
    u = solve_u(params) if u is None else u
    return params.lam / params.nu * u ** np.arange(params.limit) * (1.0 - u)


def _p_mechanistic(params: FreelanceParams, z: np.ndarray) -> float:
    # Jobs leave class i by impatience at rate nu z_i and from class I-1 by the last application.
    limit = params.limit
    impatient = sum(params.nu * z[i] / params.lam / i for i in range(1, limit))
    full = params.mu * z[limit - 1] / (params.lam * z.sum()) / limit
    return impatient + full


def _p_simplified(limit: int, u: float) -> float:
    return sum(u**i * (1.0 - u) / i for i in range(1, limit)) + u**limit / limit


def p_I(params: FreelanceParams) -> float:
    """Probability that an application wins the job, under application limit ``I``.

    Computed from the exit fluxes of the geometric invariant point and
    checked against its closed form in ``u``.
    """
    u = solve_u(params)
    mech = _p_mechanistic(params, geometric_invariant(params, u))
    simple = _p_simplified(params.limit, u)
    if abs(mech - simple) > 1e-12:
        raise AssertionError(f"P_I forms disagree: {mech!r} vs {simple!r}")
    return mech


def exit_fractions(params: FreelanceParams) -> list[float]:
    """Fraction of jobs leaving with ``i`` applications, ``i = 0..I``."""
    u = solve_u(params)
    out = [u**i * (1.0 - u) for i in range(params.limit)]
    out.append(u**params.limit)
    return out


def p_infinity(params: FreelanceParams) -> float:
    """``-(lam/(lam+mu)) ln(lam/(lam+mu))``; needs no overload."""
    x = 1.0 - u_infinity(params.lam, params.mu)
    return -x * math.log(x)
