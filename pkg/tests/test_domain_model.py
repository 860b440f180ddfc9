import json

import numpy as np
import pytest

from dyadic_flow_tents.domain_model import (
    DomainSpec,
    as_points,
    check_domain,
    convexity_check,
    defining_function,
    estimate_c_omega,
    eval_jet,
    finite_difference_residuals,
    gradient,
    hessian,
    sample_band,
)
from dyadic_flow_tents.exceptions import ConfigurationError, DomainInputError

E1 = np.array([1.0, 0.0, 0.0, 0.0])


def test_ball_defining_function(ball):
    assert defining_function(ball, np.zeros(4)) == pytest.approx(-0.5)
    assert defining_function(ball, E1) == pytest.approx(0.0)
    # (|z|^2 - 1) / 2 with interleaved real coordinates
    z = np.array([0.3, 0.4, 0.0, 0.5])
    assert defining_function(ball, z) == pytest.approx((0.5 - 1.0) / 2)


@pytest.mark.parametrize("name", ["ball", "ellipsoid"])
def test_unit_gradient_at_reference_point(name, request):
    domain = request.getfixturevalue(name)
    assert np.linalg.norm(gradient(domain, E1)) == pytest.approx(1.0)


def test_ellipsoid_jets_match_finite_differences(ellipsoid):
    rng = np.random.default_rng(3)
    z = sample_band(ellipsoid, 20, rng, lower=-0.3, upper=0.3)
    grad_err, hess_err = finite_difference_residuals(ellipsoid, z)
    assert grad_err < 1e-6
    assert hess_err < 1e-6


def test_halfspace_is_flat(halfspace):
    z = np.array([-0.2, 0.7, 0.1, -0.4])
    assert defining_function(halfspace, z) == pytest.approx(-0.2)
    assert np.allclose(gradient(halfspace, z), E1)
    assert np.allclose(hessian(halfspace, z), 0.0)
    assert not halfspace.bounded


def test_eval_jet_rejects_stacks(ball):
    jet = eval_jet(ball, E1)
    assert jet.value == pytest.approx(0.0)
    assert np.allclose(jet.hessian, np.eye(4))
    with pytest.raises(DomainInputError):
        eval_jet(ball, np.vstack([E1, E1]))


def test_wrong_dimension_is_rejected(ball):
    with pytest.raises(DomainInputError, match="4 real coordinates"):
        as_points(ball, [1.0, 0.0])


@pytest.mark.parametrize(
    "doc, message",
    [
        ({"kind": "cube", "n": 2}, "Unknown domain kind"),
        ({"kind": "ball", "n": 1}, "Complex dimension"),
        ({"kind": "ellipsoid", "n": 2, "exponents": [1]}, "needs 2 exponents"),
        ({"kind": "ellipsoid", "n": 2, "exponents": [1, 5]}, "must lie in"),
        ({"kind": "ball", "n": 2, "colour": "red"}, "Unknown keys"),
        ({"n": 2}, "missing"),
        ({"kind": "ball", "n": 2, "nbhd_width": 0}, "nbhd_width"),
    ],
)
def test_malformed_documents(doc, message):
    with pytest.raises(DomainInputError, match=message):
        DomainSpec.from_document(doc)


def test_document_files(tmp_path, ellipsoid):
    path = tmp_path / "ellipsoid.json"
    ellipsoid.dump(path)
    assert json.loads(path.read_text())["exponents"] == [1, 2]
    assert DomainSpec.load(path) == ellipsoid

    with pytest.raises(DomainInputError, match="Cannot read"):
        DomainSpec.load(tmp_path / "missing.json")


def test_digest_ignores_c_omega(ball):
    assert ball.with_c_omega(1.02).digest() == ball.digest()
    assert ball.with_c_omega(1.02).c_omega == 1.02
    assert DomainSpec(kind="ball", n=3, nbhd_width=0.3).digest() != ball.digest()


def test_sample_band_levels(ellipsoid):
    rng = np.random.default_rng(0)
    z = sample_band(ellipsoid, 200, rng, lower=-0.1, upper=-0.05)
    r = defining_function(ellipsoid, z)
    assert np.all(r >= -0.1 - 1e-9)
    assert np.all(r <= -0.05 + 1e-9)


@pytest.mark.parametrize("name", ["ball", "halfspace"])
def test_check_domain_passes(name, request):
    domain = request.getfixturevalue(name)
    report = check_domain(domain, samples=50, seed=1)
    assert report.passed
    assert report.sign_invariant
    assert report.normalized
    assert report.to_document()["passed"] is True


def test_ellipsoid_gradient_leaves_the_normalized_range(ellipsoid):
    # unit gradient at (1, 0, 0, 0) but |grad r| = 2 at (0, 0, 1, 0)
    np.testing.assert_allclose(np.linalg.norm(gradient(ellipsoid, [0.0, 0.0, 1.0, 0.0])), 2.0)
    report = check_domain(ellipsoid, samples=200, seed=1)
    assert report.gradient_residual <= 1e-6
    assert report.convexity.passed
    assert report.grad_norm_boundary[1] > 1.5
    assert not report.normalized
    assert not report.passed
    assert any("on the boundary" in w for w in report.warnings)


def test_ball_gradient_norms(ball):
    report = check_domain(ball, samples=50)
    # |grad r| = |z| on the ball
    assert report.grad_norm_boundary == pytest.approx((1.0, 1.0))
    lo, hi = report.grad_norm_band
    assert lo < 1.0 < hi


def test_c_omega_of_the_ball():
    # dist / |r| = 2 / (1 + |z|) inside the default band
    value = estimate_c_omega(DomainSpec(kind="ball", n=2), samples=200, seed=0)
    assert 1.0 <= value <= 1.06


def test_c_omega_of_the_halfspace(halfspace):
    assert estimate_c_omega(halfspace, samples=100) == pytest.approx(1.0, abs=1e-9)


def test_c_omega_needs_samples(ball):
    with pytest.raises(ConfigurationError) as excinfo:
        estimate_c_omega(ball, samples=50)
    assert excinfo.value.condition == "samples"


def test_convexity_check(ball, ellipsoid):
    report = convexity_check(ball, samples=50)
    assert report.passed
    assert report.min_eigenvalue == pytest.approx(1.0)
    assert convexity_check(ellipsoid, samples=50).passed
