import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psfluid.core import ModelError, make_params, parse_config
from psfluid.fluid import fluid_rhs, invariant_point
from psfluid.lyapunov import (
    EntropyCandidate,
    LyapunovConfig,
    MissingWeights,
    NonpositiveCoordinate,
    QuadraticCandidate,
    RoutedModelParams,
    WrongDimension,
    entropy_value,
    fd_gradient,
    flow_derivative,
    make_candidate,
    quadratic_value,
    routed_fluid_rhs,
    routed_invariant_point,
    sign_scan,
    two_class_alpha,
    two_class_quadratic,
)


def no_routing(lam, mu, nu):
    n = len(mu)
    return RoutedModelParams(np.array(lam, float), np.array(mu, float), np.array(nu, float), np.zeros((n, n)))


def test_tandem_embedding_matches_fluid_rhs():
    rng = np.random.default_rng(0)
    p = make_params(2.5, [1, 0.4, 3, 2], 0.6)
    rp = RoutedModelParams.tandem(p)
    for _ in range(100):
        z = rng.uniform(0, 5, 4)
        assert np.abs(routed_fluid_rhs(rp, z) - fluid_rhs(p, z)).max() <= 1e-14


def test_single_stage_embedding_at_invariant():
    rp = RoutedModelParams.tandem(make_params(2, [1], 1))
    assert routed_fluid_rhs(rp, [1.0]) == pytest.approx([0.0], abs=1e-15)


def test_empty_state_drift_is_arrivals():
    rp = no_routing([1, 0.5], [1, 2], [0.3, 0.7])
    assert np.array_equal(routed_fluid_rhs(rp, [0.0, 0.0]), [1.0, 0.5])


def test_routed_invariant_point_tandem_and_feedback():
    p = make_params(3, [1, 2, 0.5], 0.4)
    rp = RoutedModelParams.tandem(p)
    assert np.abs(routed_invariant_point(rp) - invariant_point(p).z_star).max() <= 1e-9
    fb = RoutedModelParams([1.0, 0.5], [1.0, 2.0], [0.3, 0.7], [[0.2, 0.5], [0.4, 0.1]])
    z = routed_invariant_point(fb)
    assert np.abs(routed_fluid_rhs(fb, z)).max() <= 1e-8


def test_param_validation():
    with pytest.raises(ModelError):
        RoutedModelParams([0.0, 0.0], [1, 1], [1, 1], np.zeros((2, 2)))
    with pytest.raises(ModelError):
        RoutedModelParams([1.0, 0.0], [1, 1], [1, 1], [[0.6, 0.6], [0, 0]])
    with pytest.raises(WrongDimension):
        RoutedModelParams([1.0], [1, 1], [1, 1], np.zeros((2, 2)))


def test_from_config_overrides():
    cfg = parse_config("lambda=1\nmu=1,2\nnu=0.5\nlambda_vec=1,0.5\nnu_vec=0.3,0.7\nrouting=0\n")
    rp = RoutedModelParams.from_config(cfg)
    assert np.array_equal(rp.routing, np.zeros((2, 2)))
    assert np.array_equal(rp.nu_vec, [0.3, 0.7])
    plain = RoutedModelParams.from_config(parse_config("lambda=2\nmu=1,1\nnu=1\n"))
    assert np.array_equal(plain.routing, [[0, 1], [0, 0]])


def test_entropy_values():
    assert entropy_value([1.0, 1.0], [1.0, 2.0]) == pytest.approx(math.log(9 / 8), abs=1e-15)
    z_star = np.array([0.3, 1.2, 0.5])
    assert entropy_value(z_star, z_star) == 0.0
    with pytest.raises(NonpositiveCoordinate):
        entropy_value([1.0, 0.0], [1.0, 1.0])


@given(st.floats(1e-3, 1e3))
def test_entropy_scale_invariance(c):
    z_star = np.array([0.3, 1.2, 0.5])
    assert abs(entropy_value(c * z_star, z_star)) <= 1e-12 * max(1.0, c)


def test_quadratic_values():
    z_star = np.array([1.0, 2.0, 1.0])
    mu = np.array([1.0, 2.0, 4.0])
    assert quadratic_value(z_star, z_star, mu) == 0.0
    z = z_star.copy()
    z[1] += 0.3
    w = mu[1] * z_star[1] / z_star.sum()
    assert quadratic_value(z, z_star, mu) == pytest.approx(0.09 / w, rel=1e-14)
    z[1] += 0.3
    assert quadratic_value(z, z_star, mu) == pytest.approx(4 * 0.09 / w, rel=1e-14)
    with pytest.raises(NonpositiveCoordinate):
        quadratic_value(z, [1.0, 0.0, 1.0], mu)


@pytest.mark.parametrize("kind", ["entropy", "quadratic", "two_class"])
def test_gradients_match_finite_differences(kind):
    rp = RoutedModelParams([1.0, 0.5], [1.0, 2.0], [0.3, 0.7], [[0.2, 0.5], [0.4, 0.1]])
    cand = make_candidate(kind, rp, config=LyapunovConfig((0.4, 0.7)))
    rng = np.random.default_rng(5)
    for _ in range(100):
        z = rng.uniform(0.05, 4.0, 2)
        g, fd = cand.gradient(z), fd_gradient(cand, z)
        assert np.abs(g - fd).max() <= 1e-5 * max(1.0, np.abs(g).max())


@pytest.mark.parametrize("kind", ["entropy", "quadratic"])
def test_flow_derivative_vanishes_at_invariant(kind):
    rp = RoutedModelParams.tandem(make_params(2, [1, 3, 0.5], 0.7))
    cand = make_candidate(kind, rp)
    assert abs(flow_derivative(cand, rp, cand.z_star)) <= 1e-9


def test_two_class_candidate():
    rp = RoutedModelParams([1.0, 0.5], [1.0, 2.0], [0.3, 0.7], [[0.2, 0.5], [0.4, 0.1]])
    z_star = routed_invariant_point(rp)
    conf = LyapunovConfig((0.4, 0.7))
    assert two_class_quadratic(rp, conf, z_star) == 0.0
    z = z_star + [0.2, -0.1]
    base = two_class_quadratic(rp, conf, z)
    assert two_class_quadratic(rp, LyapunovConfig((0.8, 1.4)), z) == pytest.approx(base / 2)
    alpha = two_class_alpha(rp, conf)
    assert alpha[0] == pytest.approx(1 / ((0.8 * 1.0 + 0.4 * 2.0) * 0.4))
    assert alpha[1] == pytest.approx(1 / ((0.9 * 2.0 + 0.5 * 1.0) * 0.7))


def test_two_class_reduces_to_quadratic_without_routing():
    rp = no_routing([1.0, 2.0], [1.5, 0.5], [0.4, 1.2])
    z_star = routed_invariant_point(rp)
    shares = z_star / z_star.sum()
    alpha = two_class_alpha(rp, LyapunovConfig(tuple(shares)))
    weights = 1.0 / (rp.mu * shares)
    assert np.allclose(alpha, weights, rtol=1e-14)
    z = np.array([0.7, 3.1])
    assert two_class_quadratic(rp, LyapunovConfig(tuple(shares)), z) == pytest.approx(
        quadratic_value(z, z_star, rp.mu), rel=1e-13
    )


def test_two_class_errors():
    rp2 = no_routing([1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(MissingWeights):
        two_class_quadratic(rp2, LyapunovConfig(), [1.0, 1.0])
    rp3 = no_routing([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    with pytest.raises(WrongDimension):
        two_class_quadratic(rp3, LyapunovConfig((1.0, 1.0)), [1.0, 1.0, 1.0])
    with pytest.raises(ModelError):
        LyapunovConfig((1.0, -1.0))


def test_sign_scan_report(tmp_path):
    rp = RoutedModelParams.tandem(make_params(2, [1, 1], 1))
    cand = make_candidate("entropy", rp)
    rep = sign_scan(cand, rp, (0.0, 5.0), 500, seed=1)
    assert rep.samples == 500 and rep.violation_count == 0
    assert np.all(rep.states > 0) and np.all(rep.states <= 5.0)
    again = sign_scan(cand, rp, (0.0, 5.0), 500, seed=1)
    assert np.array_equal(rep.states, again.states)
    path = tmp_path / "scan.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_idx,z1,z2,L,dLdt,violation_flag"
    assert len(lines) == 501


def test_sign_scan_min_norm_and_empty():
    rp = RoutedModelParams.tandem(make_params(2, [1, 1, 1], 1))
    cand = make_candidate("entropy", rp)
    norm = cand.z_star.sum()
    rep = sign_scan(cand, rp, (0.0, 3 * norm), 300, seed=2, min_norm=norm)
    assert np.all(rep.states.sum(axis=1) >= norm)
    empty = sign_scan(cand, rp, (0.0, 1.0), 0, seed=2)
    assert empty.samples == 0 and empty.violation_count == 0
    with pytest.raises(ModelError):
        sign_scan(cand, rp, (1.0, 0.5), 10, seed=2)


def test_candidates_detect_a_violation():
    # A quadratic centred at the wrong point must increase somewhere along the flow.
    rp = RoutedModelParams.tandem(make_params(2, [1, 1], 1))
    wrong = QuadraticCandidate(routed_invariant_point(rp) * 3.0, rp.mu)
    rep = sign_scan(wrong, rp, (0.0, 5.0), 2000, seed=3)
    assert rep.violation_count > 0
    assert isinstance(make_candidate("entropy", rp), EntropyCandidate)
    with pytest.raises(ModelError):
        make_candidate("cubic", rp)
