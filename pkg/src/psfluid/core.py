"""Shared types for the multistage processor-sharing model.

Holds the model parameters, trajectory container, scenario configuration
and the exception hierarchy used by every other module.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ModelError(ValueError):
    """Base class for invalid model input."""


class NonpositiveRate(ModelError):
    pass


class EmptyStageList(ModelError):
    pass


class NotOverloaded(ModelError):
    """Raised when an operation needs ``lambda * sum(1/mu_i) > 1``."""


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


class StepTooLarge(NumericalFailure):
    pass


class NoConvergence(NumericalFailure):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Arrival rate ``lam``, stage rates ``mu`` and impatience rate ``nu``."""

    lam: float
    mu: tuple[float, ...]
    nu: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def stages(self) -> int:
        return len(self.mu)

    @property
    def load(self) -> float:
        return self.lam * sum(1.0 / m for m in self.mu)

    @property
    def overloaded(self) -> bool:
        return self.load > 1.0

    def require_overload(self) -> "ModelParams":
        if not self.overloaded:
            raise NotOverloaded(
                f"system is not overloaded: lambda * sum(1/mu_i) = {self.load!r} <= 1"
            )
        return self


def validate_params(params: ModelParams) -> ModelParams:
    """Check rates and return ``params`` (whose ``overloaded`` flag is derived).

    Idempotent: validating an already valid instance returns an equal one.
    """
    if len(params.mu) == 0:
        raise EmptyStageList("at least one service stage is required")
    for name, value in [("lambda", params.lam), ("nu", params.nu)] + [
        (f"mu[{i}]", m) for i, m in enumerate(params.mu)
    ]:
        if not (value > 0.0) or not math.isfinite(value):
            raise NonpositiveRate(f"{name} must be positive and finite, got {value!r}")
    return params


def make_params(lam: float, mu: Sequence[float], nu: float) -> ModelParams:
    return validate_params(ModelParams(lam, tuple(mu), nu))


def as_state(values, stages: int | None = None) -> np.ndarray:
    """Return a float state vector, checking shape and nonnegativity."""
    z = np.array(values, dtype=float).reshape(-1)
    if stages is not None and z.size != stages:
        raise ModelError(f"state has {z.size} coordinates, expected {stages}")
    if np.any(z < 0) or not np.all(np.isfinite(z)):
        raise ModelError(f"state coordinates must be finite and >= 0, got {z.tolist()}")
    return z


def l1_norm(state) -> float:
    return float(np.sum(np.abs(np.asarray(state, dtype=float))))


def fmt(x: float) -> str:
    """Shortest round-trip decimal for a float."""
    return repr(float(x))


@dataclass
class Trajectory:
    """Grid of times (starting at 0) with one state row per time."""

    times: np.ndarray
    states: np.ndarray
    clamped: float = 0.0

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.ndim != 1 or len(self.times) != len(self.states):
            raise ValueError("times and states must have the same length")
        if len(self.times) == 0 or self.times[0] != 0.0:
            raise ValueError("trajectory must start at t = 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def stages(self) -> int:
        return self.states.shape[1]

    def norms(self) -> np.ndarray:
        return np.abs(self.states).sum(axis=1)

    def write_csv(self, path: str | Path, prefix: str = "z") -> None:
        header = ["t"] + [f"{prefix}{i + 1}" for i in range(self.stages)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t, row in zip(self.times, self.states):
                w.writerow([fmt(t)] + [fmt(v) for v in row])

    @classmethod
    def read_csv(cls, path: str | Path) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, 0], data[:, 1:])


def time_grid(horizon: float, step: float) -> np.ndarray:
    """Uniform grid 0, step, ..., horizon; horizon must be a multiple of step."""
    if not (horizon > 0 and step > 0) or step > horizon:
        raise ConfigError(f"need 0 < step <= horizon, got step={step!r}, horizon={horizon!r}")
    n = round(horizon / step)
    if abs(n * step - horizon) > 1e-9 * horizon:
        raise ConfigError(f"horizon {horizon!r} is not a multiple of step {step!r}")
    return np.arange(n + 1) * step


def bisect(func: Callable[[float], float], lo: float, hi: float, xtol: float = 1e-12) -> float:
    """Root of ``func`` on ``[lo, hi]`` given a sign change; stops at float resolution."""
    flo = func(lo)
    if flo == 0.0:
        return lo
    if func(hi) == 0.0:
        return hi
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fmid = func(mid)
        if fmid == 0.0:
            return mid
        if (fmid > 0) == (flo > 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# Scenario configuration -----------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    params: ModelParams
    initial_state: tuple[float, ...]
    horizon: float = 10.0
    grid_step: float = 1e-3
    seed: int = 0
    replicas: int = 1
    scale_r: float = 1.0
    # Optional analysis keys, used by the Lyapunov scans.
    nu_vec: tuple[float, ...] | None = None
    lambda_vec: tuple[float, ...] | None = None
    routing: tuple[tuple[float, ...], ...] | None = None
    weights: tuple[float, ...] | None = None
    scan_samples: int = 10_000
    scan_box: tuple[float, ...] | None = None
    scan_min_norm: float = 0.0

    def __post_init__(self) -> None:
        validate_params(self.params)
        as_state(self.initial_state, self.params.stages)
        if not (self.horizon > 0 and self.grid_step > 0 and self.grid_step <= self.horizon):
            raise ConfigError("need horizon > 0, grid_step > 0 and grid_step <= horizon")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.replicas < 1:
            raise ConfigError("replicas must be positive")
        if not self.scale_r > 0:
            raise ConfigError("scale_r must be positive")

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


CONFIG_KEYS = (
    "lambda", "mu", "nu", "stages", "initial_state", "horizon", "grid_step", "seed",
    "replicas", "scale_r", "nu_vec", "lambda_vec", "routing", "weights",
    "scan_samples", "scan_box", "scan_min_norm",
)


def _float_list(key: str, text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from exc


def parse_config(text: str) -> ScenarioConfig:
    """Parse the ``key = value`` scenario format (``#`` starts a comment)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    for key in ("lambda", "mu", "nu"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    try:
        mu = _float_list("mu", raw["mu"])
        params = validate_params(ModelParams(float(raw["lambda"]), mu, float(raw["nu"])))
        if "stages" in raw and int(raw["stages"]) != len(mu):
            raise ConfigError("stages does not match the length of mu")
        kw: dict = {}
        kw["initial_state"] = (
            _float_list("initial_state", raw["initial_state"])
            if "initial_state" in raw else (0.0,) * len(mu)
        )
        for key in ("horizon", "grid_step", "scale_r", "scan_min_norm"):
            if key in raw:
                kw[key] = float(raw[key])
        for key in ("seed", "replicas", "scan_samples"):
            if key in raw:
                kw[key] = int(raw[key], 0)
        for key in ("nu_vec", "lambda_vec", "weights", "scan_box"):
            if key in raw:
                kw[key] = _float_list(key, raw[key])
        if "routing" in raw:
            kw["routing"] = tuple(
                _float_list("routing", row) for row in raw["routing"].split(";") if row.strip()
            )
        return ScenarioConfig(params=params, **kw)
    except (ConfigError, ModelError):
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
