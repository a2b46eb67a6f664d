import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psfluid.core import (
    ConfigError,
    EmptyStageList,
    ModelError,
    ModelParams,
    NonpositiveRate,
    NotOverloaded,
    ScenarioConfig,
    Trajectory,
    bisect,
    fmt,
    make_params,
    parse_config,
    time_grid,
    validate_params,
)


def test_load_and_overload_flag():
    p = make_params(2, [1, 1], 1)
    assert p.load == 4.0
    assert p.overloaded
    assert not make_params(0.4, [1, 1], 1).overloaded


def test_boundary_load_is_not_overloaded():
    with pytest.raises(NotOverloaded, match="sum"):
        make_params(0.5, [1, 1], 1).require_overload()


@pytest.mark.parametrize(
    "lam, mu, nu, exc",
    [
        (0.0, [1], 1, NonpositiveRate),
        (1, [1, -1], 1, NonpositiveRate),
        (1, [1], 0.0, NonpositiveRate),
        (1, [1], float("inf"), NonpositiveRate),
        (1, [], 1, EmptyStageList),
    ],
)
def test_invalid_params(lam, mu, nu, exc):
    with pytest.raises(exc):
        make_params(lam, mu, nu)


@given(
    st.floats(0.01, 100),
    st.lists(st.floats(0.01, 100), min_size=1, max_size=6),
    st.floats(0.01, 100),
)
def test_validation_is_idempotent(lam, mu, nu):
    p = make_params(lam, mu, nu)
    assert validate_params(validate_params(p)) == p


def test_trajectory_checks():
    with pytest.raises(ValueError):
        Trajectory([0.5, 1.0], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [[1.0], [2.0]])
    tr = Trajectory([0.0, 1.0], [1.0, 2.0])
    assert tr.states.shape == (2, 1)
    assert np.allclose(tr.norms(), [1.0, 2.0])


def test_trajectory_csv_round_trip(tmp_path):
    tr = Trajectory([0.0, 0.1, 0.2], [[0.1, 1 / 3], [2.0, 1e-17], [0.0, 5.5]])
    path = tmp_path / "t.csv"
    tr.write_csv(path)
    assert path.read_text().splitlines()[0] == "t,z1,z2"
    back = Trajectory.read_csv(path)
    assert np.array_equal(back.states, tr.states)
    assert np.array_equal(back.times, tr.times)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


def test_time_grid():
    g = time_grid(1.0, 0.1)
    assert len(g) == 11 and g[-1] == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        time_grid(1.0, 0.3)
    with pytest.raises(ConfigError):
        time_grid(1.0, 2.0)


def test_bisect_finds_root():
    assert bisect(lambda x: x * x - 2.0, 0.0, 2.0, 1e-15) == pytest.approx(math.sqrt(2), abs=1e-15)


def test_parse_config_full():
    cfg = parse_config(
        """
        # comment line
        lambda = 2
        mu = 1, 1   # two stages
        nu = 1
        initial_state = 0.5, 0
        horizon = 5
        grid_step = 0.01
        seed = 0x10
        replicas = 3
        scale_r = 50
        routing = 0, 1; 0, 0
        weights = 0.5, 0.5
        scan_box = 0.1, 4
        """
    )
    assert cfg.params == ModelParams(2.0, (1.0, 1.0), 1.0)
    assert cfg.initial_state == (0.5, 0.0)
    assert cfg.seed == 16 and cfg.replicas == 3 and cfg.scale_r == 50.0
    assert cfg.routing == ((0.0, 1.0), (0.0, 0.0))
    assert cfg.scan_box == (0.1, 4.0)


def test_parse_config_defaults_to_empty_start():
    cfg = parse_config("lambda=2\nmu=1,1,1\nnu=1\n")
    assert cfg.initial_state == (0.0, 0.0, 0.0)
    assert cfg.horizon == 10.0 and cfg.seed == 0


@pytest.mark.parametrize(
    "text",
    [
        "lambda=2\nmu=1\n",  # missing nu
        "lambda=2\nmu=1\nnu=1\ncolour=red\n",
        "lambda=2\nlambda=3\nmu=1\nnu=1\n",
        "lambda=2\nmu=1\nnu=1\nstages=2\n",
        "lambda=2\nmu=1,x\nnu=1\n",
        "lambda=2\nmu=1\nnu=1\nno equals sign\n",
        "lambda=2\nmu=1\nnu=1\nhorizon=1\ngrid_step=2\n",
        "lambda=2\nmu=1\nnu=1\nseed=-1\n",
    ],
)
def test_parse_config_errors(text):
    with pytest.raises((ConfigError, ModelError)):
        parse_config(text)


def test_config_rejects_wrong_state_length():
    with pytest.raises(ModelError):
        ScenarioConfig(make_params(2, [1, 1], 1), (0.0,))
