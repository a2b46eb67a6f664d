"""Hypoexponential random variables (sums of independent exponentials in series).

All distribution functions go through uniformization of the upper-bidiagonal
generator, so repeated and near-equal rates need no special casing.  For rate
``Lam = max(rates)`` the embedded chain stays in phase ``l`` with probability
``1 - rates[l]/Lam`` and moves on otherwise; with ``pi_n`` its phase
distribution after ``n`` jumps,

    P{B > x}  = sum_n Poisson(n; Lam x) * sum(pi_n)
    f_B(x)    = sum_n Poisson(n; Lam x) * rates[-1] * pi_n[-1]
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import special

from .core import ModelError

POISSON_TAIL = 1e-14
# Bounds the (rows x terms) Poisson weight matrix built per chunk.
_CHUNK_ELEMENTS = 2_000_000


class EmptyPhaseList(ModelError):
    pass


class RateListMismatch(ModelError):
    pass


@dataclass(frozen=True)
class HypoExp:
    """Sum of independent ``Exp(rate)`` variables; no rates means the point mass at 0."""

    rates: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        rates = tuple(float(r) for r in self.rates)
        if any(not r > 0 for r in rates):
            raise ModelError(f"rates must be positive, got {rates}")
        object.__setattr__(self, "rates", rates)

    def __len__(self) -> int:
        return len(self.rates)

    def extend(self, rate: float) -> "HypoExp":
        return HypoExp(self.rates + (float(rate),))

    @property
    def mean(self) -> float:
        return sum(1.0 / r for r in self.rates)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.zeros(size)
        for r in self.rates:
            out += rng.exponential(1.0 / r, size)
        return out


@dataclass(frozen=True)
class ImpatienceClock:
    nu: float

    def __post_init__(self) -> None:
        if not self.nu > 0:
            raise ModelError("impatience rate must be positive")

    def tail(self, t):
        return np.exp(-self.nu * np.asarray(t, dtype=float))


class _Uniformized:
    """Jump-chain sequences for one rate list, grown lazily."""

    def __init__(self, rates: tuple[float, ...]):
        self.rates = np.array(rates)
        self.lam = float(self.rates.max())
        self.stay = 1.0 - self.rates / self.lam
        self.move = self.rates / self.lam
        pi = np.zeros(len(rates))
        pi[0] = 1.0
        self._pi = pi
        self.alive = [1.0]
        self.last = [pi[-1]]

    def grow(self, n_terms: int) -> None:
        pi = self._pi
        while len(self.alive) < n_terms:
            nxt = pi * self.stay
            nxt[1:] += pi[:-1] * self.move[:-1]
            pi = nxt
            self.alive.append(float(pi.sum()))
            self.last.append(float(pi[-1]))
        self._pi = pi


@lru_cache(maxsize=256)
def _chain(rates: tuple[float, ...]) -> _Uniformized:
    return _Uniformized(rates)


def _upper_terms(m_max: float) -> int:
    """Smallest count of leading Poisson terms whose complement is below POISSON_TAIL."""
    n = int(m_max + 10.0 * np.sqrt(m_max) + 30)
    while special.pdtrc(n, m_max) >= POISSON_TAIL:
        n += max(10, int(np.sqrt(m_max)))
    return n + 1


def _lower_term(m_min: float) -> int:
    """Index below which the Poisson mass is under POISSON_TAIL."""
    n = int(m_min - 10.0 * np.sqrt(m_min) - 30)
    if n <= 0:
        return 0
    while n > 0 and special.pdtr(n - 1, m_min) >= POISSON_TAIL:
        n -= max(10, int(np.sqrt(m_min)))
    return max(n, 0)


def _mix(chain: _Uniformized, seq_name: str, m: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_n Poisson(n; m) * seq[n]`` for a flat array ``m >= 0``.

    Arguments are sorted and processed in chunks, each with its own window
    of Poisson terms.
    """
    out = np.empty_like(m)
    if m.size == 0:
        return out
    order = np.argsort(m, kind="stable")
    ms = m[order]
    res = np.empty_like(ms)
    start = 0
    while start < ms.size:
        guess = ms[min(ms.size - 1, start + 4096)]
        rows = max(256, _CHUNK_ELEMENTS // _upper_terms(float(guess)))
        mc = ms[start:start + rows]
        hi = _upper_terms(float(mc[-1]))
        lo = _lower_term(float(mc[0]))
        chain.grow(hi)
        seq = np.array(getattr(chain, seq_name)[lo:hi])
        n = np.arange(lo, hi, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            logw = n[None, :] * np.log(mc)[:, None] - mc[:, None] - special.gammaln(n + 1.0)[None, :]
        zero = mc == 0.0
        if zero.any():
            logw[zero] = -np.inf
            if lo == 0:
                logw[zero, 0] = 0.0
        res[start:start + rows] = np.exp(logw) @ seq
        start += rows
    out[order] = res
    return out


def survival(h: HypoExp, x):
    """``P{B > x}``; 1 for ``x < 0``, and the point mass at 0 for an empty rate list."""
    xa = np.asarray(x, dtype=float)
    flat = xa.reshape(-1)
    out = np.ones_like(flat)
    pos = flat >= 0
    if len(h) == 0:
        out[pos] = 0.0
    else:
        chain = _chain(h.rates)
        out[pos] = _mix(chain, "alive", chain.lam * flat[pos])
        np.clip(out, 0.0, 1.0, out=out)
    out = out.reshape(xa.shape)
    return float(out) if out.ndim == 0 else out


def cdf(h: HypoExp, x):
    return 1.0 - survival(h, x)


def pdf(h: HypoExp, x):
    """Density of ``B``: probability flux out of the last phase."""
    if len(h) == 0:
        raise EmptyPhaseList("the point mass at 0 has no density")
    xa = np.asarray(x, dtype=float)
    flat = xa.reshape(-1)
    out = np.zeros_like(flat)
    pos = flat >= 0
    chain = _chain(h.rates)
    out[pos] = h.rates[-1] * _mix(chain, "last", chain.lam * flat[pos])
    out = out.reshape(xa.shape)
    return float(out) if out.ndim == 0 else out


def band_probability(h_lo: HypoExp, h_hi: HypoExp, tau, nu: float, t):
    """``P{B_lo <= tau < B_hi, D > t}`` where ``B_hi = B_lo + one more phase``."""
    if len(h_hi) != len(h_lo) + 1 or h_hi.rates[:-1] != h_lo.rates:
        raise RateListMismatch(
            f"{h_hi.rates} does not extend {h_lo.rates} by exactly one rate"
        )
    band = np.asarray(survival(h_hi, tau)) - np.asarray(survival(h_lo, tau))
    out = band * np.exp(-nu * np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def identity_residual(rates: Sequence[float], x):
    """``P{B_1^i > x} - sum_j f_{B_1^j}(x) / mu_j``, which is identically zero."""
    rates = tuple(float(r) for r in rates)
    if not rates:
        raise EmptyPhaseList("identity needs at least one rate")
    res = np.array(survival(HypoExp(rates), x), dtype=float)
    for j in range(1, len(rates) + 1):
        res -= np.asarray(pdf(HypoExp(rates[:j]), x)) / rates[j - 1]
    return float(res) if res.ndim == 0 else res


def expected_min_scaled(h: HypoExp, x: float, nu: float) -> float:
    """``E min{x B, D}`` with ``D ~ Exp(nu)``, via the Laplace transform of ``B`` at ``nu x``."""
    if not x > 0 or not nu > 0:
        raise ModelError("expected_min_scaled needs x > 0 and nu > 0")
    if len(h) == 0:
        return 0.0
    log_lt = -sum(np.log1p(nu * x / r) for r in h.rates)
    return float(-np.expm1(log_lt) / nu)
