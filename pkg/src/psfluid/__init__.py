"""Fluid, integral and stochastic models of a multistage processor-sharing queue with impatience."""
from .core import (
    ConfigError,
    ModelError,
    ModelParams,
    NotOverloaded,
    NumericalFailure,
    ScenarioConfig,
    Trajectory,
    load_config,
    make_params,
    parse_config,
)

__all__ = [
    "ConfigError",
    "ModelError",
    "ModelParams",
    "NotOverloaded",
    "NumericalFailure",
    "ScenarioConfig",
    "Trajectory",
    "load_config",
    "make_params",
    "parse_config",
]
