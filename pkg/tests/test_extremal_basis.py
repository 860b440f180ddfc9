import math

import numpy as np
import pytest

from dyadic_flow_tents.exceptions import ConfigurationError, DomainInputError, ScaleRangeError
from dyadic_flow_tents.extremal_basis import (
    EpsLadder,
    complex_normal,
    estimate_structure_constants,
    extremal_frame,
    polydisc_contains,
    rho,
    tau,
)

E1 = np.array([1.0, 0.0, 0.0, 0.0])
NORMAL = np.array([1.0, 0.0], dtype=complex)
TANGENT = np.array([0.0, 1.0], dtype=complex)


def test_tau_on_the_ball(ball, tau_config):
    eps = 0.01
    # Re(lambda) + |lambda|^2 / 2 along the normal, |lambda|^2 / 2 along the tangent
    assert tau(ball, E1, NORMAL, eps, tau_config) == pytest.approx(math.sqrt(1 + 2 * eps) - 1, rel=1e-3)
    assert tau(ball, E1, TANGENT, eps, tau_config) == pytest.approx(math.sqrt(2 * eps), rel=1e-3)


def test_tau_sees_the_degenerate_direction(ellipsoid, tau_config):
    eps = 0.01
    # |z_2|^4 / 2 along the second axis
    assert tau(ellipsoid, E1, TANGENT, eps, tau_config) == pytest.approx((2 * eps) ** 0.25, rel=1e-3)


def test_tau_rejects_bad_input(ball):
    with pytest.raises(ScaleRangeError):
        tau(ball, E1, NORMAL, 0.2)
    with pytest.raises(DomainInputError, match="unit vector"):
        tau(ball, E1, 2 * NORMAL, 0.01)


def test_extremal_frame_on_the_ball(ball, tau_config):
    frame = extremal_frame(ball, E1, 0.01, config=tau_config)
    assert np.allclose(np.abs(frame.basis[:, 0]), np.abs(complex_normal(ball, E1)))
    assert abs(frame.basis[1, 1]) == pytest.approx(1.0)
    assert frame.radii[0] < frame.radii[1]
    assert polydisc_contains(frame, E1)
    assert not polydisc_contains(frame, np.array([0.9, 0.0, 0.0, 0.0]))


def test_extremal_frame_on_the_ellipsoid(ellipsoid, tau_config):
    frame = extremal_frame(ellipsoid, E1, 0.01, config=tau_config)
    assert frame.radii[1] == pytest.approx(0.02 ** 0.25, rel=1e-3)


def test_extremal_frame_needs_a_band_point(ball):
    with pytest.raises(DomainInputError, match="band"):
        extremal_frame(ball, np.zeros(4), 0.01)


def test_eps_ladder_ends_at_the_cap(ball):
    values = EpsLadder(minimum=1e-3, ratio=2.0).values(ball)
    assert values[-1] == pytest.approx(ball.nbhd_width)
    assert values[0] <= 1e-3
    assert np.all(np.diff(values) > 0)
    with pytest.raises(ConfigurationError):
        EpsLadder(minimum=0.5).values(ball)


def test_rho_basics(ball, tau_config):
    ladder = EpsLadder(minimum=1e-3, ratio=2.0 ** 0.25)
    assert rho(ball, E1, E1, ladder, tau_config).value == 0.0
    with pytest.raises(DomainInputError, match="boundary points"):
        rho(ball, E1, np.zeros(4), ladder, tau_config)


def test_rho_is_anisotropic(ball, tau_config):
    ladder = EpsLadder(minimum=1e-3, ratio=2.0 ** 0.25)
    b = 0.2
    tangential = np.array([math.cos(b), 0.0, math.sin(b), 0.0])
    normal = np.array([math.cos(b), math.sin(b), 0.0, 0.0])
    near = rho(ball, E1, tangential, ladder, tau_config).value
    far = rho(ball, E1, normal, ladder, tau_config).value
    # the normal displacement 1 - cos b fixes the tangential distance
    assert near == pytest.approx(((2.0 - math.cos(b)) ** 2 - 1.0) / 2.0, rel=0.02)
    assert far > 5 * near


def test_oracle_matrix(ball_oracle):
    R = ball_oracle.rho_matrix()
    assert np.array_equal(R, R.T)
    assert np.all(np.diag(R) == 0.0)
    off = R[~np.eye(len(R), dtype=bool)]
    finite = off[np.isfinite(off)]
    assert np.all(np.isin(finite, ball_oracle.eps))
    assert ball_oracle.pair(0, 1) == R[0, 1]


def test_rho_from_a_sample_point(ball_oracle):
    row = ball_oracle.rho_from_point(ball_oracle.points[3])
    assert row[3] == 0.0
    assert np.array_equal(row, ball_oracle.rho_row(3))


def test_structure_constants(ball, ball_sample, ball_oracle):
    params = estimate_structure_constants(
        ball, ball_sample.points, triples=2000, oracle=ball_oracle, weights=ball_sample.weights
    )
    assert 1.0 <= params.kappa < math.inf
    assert params.doubling_K >= 1.0
    assert params.per_scale_K
    assert params.triples_used + sum(count for _, count in params.skipped) == 2000


def test_structure_constants_need_points(ball, ball_sample):
    with pytest.raises(ConfigurationError):
        estimate_structure_constants(ball, ball_sample.points[:100])
