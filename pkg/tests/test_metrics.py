import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psfluid.core import ModelError, NotOverloaded
from psfluid.fluid import invariant_point
from psfluid.metrics import (
    FreelanceParams,
    exit_fractions,
    geometric_invariant,
    p_I,
    p_infinity,
    solve_u,
)

overloaded = st.builds(
    lambda limit, mu, nu, extra: FreelanceParams(mu * (1 + extra) / limit, mu, nu, limit),
    st.integers(1, 8),
    st.floats(0.2, 5.0),
    st.floats(0.05, 5.0),
    st.floats(0.01, 4.0),
)


def test_solve_u_closed_forms():
    assert solve_u(FreelanceParams(2, 1, 1, 1)) == pytest.approx(0.5, abs=1e-14)
    assert solve_u(FreelanceParams(1, 1, 1, 2)) == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-14)
    assert solve_u(FreelanceParams(1, 1, 1, 60)) == pytest.approx(0.5, abs=1e-14)


def test_not_overloaded():
    with pytest.raises(NotOverloaded):
        solve_u(FreelanceParams(1, 1, 1, 1))
    with pytest.raises(ModelError):
        FreelanceParams(1, 1, 1, 0)


def test_geometric_invariant_single_stage():
    assert geometric_invariant(FreelanceParams(2, 1, 1, 1)) == pytest.approx([1.0])


@settings(max_examples=40, deadline=None)
@given(overloaded)
def test_geometric_invariant_matches_fluid(fp):
    u = solve_u(fp)
    z = geometric_invariant(fp)
    fl = invariant_point(fp.as_model_params()).z_star
    assert np.abs(z - fl).max() <= 1e-9 * max(1.0, fl.max())
    norm = fp.lam / fp.nu * (1 - u ** fp.limit)
    assert z.sum() == pytest.approx(norm, rel=1e-12)
    assert fp.mu * (1 - u) / (fp.nu * u) == pytest.approx(norm, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(overloaded)
def test_p_I_is_a_probability_and_ignores_nu(fp):
    value = p_I(fp)
    assert 0 < value < 1
    for nu in (0.1, 1.0, 10.0):
        other = FreelanceParams(fp.lam, fp.mu, nu, fp.limit)
        assert p_I(other) == pytest.approx(value, abs=1e-9)


def test_p_I_values():
    assert p_I(FreelanceParams(2, 1, 1, 1)) == pytest.approx(0.5, abs=1e-14)
    u = (math.sqrt(5) - 1) / 2
    assert p_I(FreelanceParams(1, 1, 1, 2)) == pytest.approx(u * (1 - u) + u * u / 2, abs=1e-13)
    assert p_I(FreelanceParams(1, 1, 1, 2)) == pytest.approx(0.42705, abs=1e-5)


def test_p_infinity():
    assert p_infinity(FreelanceParams(1, 1, 1, 1)) == pytest.approx(math.log(2) / 2, abs=1e-15)
    assert p_infinity(FreelanceParams(1e-9, 1, 1, 1)) < 1e-7
    assert p_infinity(FreelanceParams(1e9, 1, 1, 1)) < 1e-7
    assert abs(p_I(FreelanceParams(1, 1, 1, 60)) - p_infinity(FreelanceParams(1, 1, 1, 60))) <= 1e-6


def test_exit_fractions_sum_to_one():
    f = exit_fractions(FreelanceParams(1, 1, 1, 5))
    assert len(f) == 6
    assert sum(f) == pytest.approx(1.0, abs=1e-14)
    u = solve_u(FreelanceParams(1, 1, 1, 5))
    assert f[-1] == pytest.approx(u ** 5)


def test_from_model_params():
    fp = FreelanceParams(1.5, 2.0, 0.3, 3)
    assert FreelanceParams.from_model_params(fp.as_model_params()) == fp
    from psfluid.core import make_params

    with pytest.raises(ModelError):
        FreelanceParams.from_model_params(make_params(1, [1, 2], 1))
