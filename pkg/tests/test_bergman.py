import math

import numpy as np
import pytest

from dyadic_flow_tents.bergman import (
    KernelTentScanner,
    build_kernel_model,
    domain_volume,
    kernel,
    kernel_tent_bound_scan,
    monomial_moment,
    project,
    select_cutoff,
)
from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.exceptions import AccuracyError, DomainInputError

ORIGIN = np.zeros(4)


def test_volumes_and_moments(ball, ellipsoid):
    assert domain_volume(ball) == pytest.approx(math.pi ** 2 / 2)
    assert domain_volume(ellipsoid) == pytest.approx(2 * math.pi ** 2 / 3)
    # pi^n alpha! / (n + |alpha|)! on the ball
    assert monomial_moment(ball, [1, 0]) == pytest.approx(math.pi ** 2 / 6)
    assert monomial_moment(ball, [1, 1]) == pytest.approx(math.pi ** 2 / 24)


def test_closed_form_kernel(ball_kernel):
    assert ball_kernel.mode == "ball_closed_form"
    assert kernel(ball_kernel, ORIGIN, ORIGIN) == pytest.approx(2 / math.pi ** 2)
    z = np.array([0.3, 0.1, 0.0, 0.4])
    xi = np.array([0.2, -0.5, 0.1, 0.0])
    assert kernel(ball_kernel, z, xi) == pytest.approx(np.conj(kernel(ball_kernel, xi, z)))
    assert kernel(ball_kernel, z, z).real > 0


def test_series_matches_the_closed_form(ball, ball_kernel):
    series = build_kernel_model(ball, mode="reinhardt_series", tolerance=1e-8)
    rng = np.random.default_rng(0)
    z = rng.uniform(-0.35, 0.35, size=(20, 4))
    xi = rng.uniform(-0.35, 0.35, size=(20, 4))
    assert np.allclose(kernel(series, z, xi), kernel(ball_kernel, z, xi), rtol=1e-6)


def test_series_refuses_far_pairs(ellipsoid):
    model = build_kernel_model(ellipsoid, margin=0.2)
    assert model.mode == "reinhardt_series"
    far = np.array([0.95, 0.0, 0.0, 0.0])
    with pytest.raises(AccuracyError):
        kernel(model, far, far)


def test_ellipsoid_kernel_on_the_diagonal(ellipsoid):
    model = build_kernel_model(ellipsoid)
    # K(0, 0) = 1 / Vol
    assert kernel(model, ORIGIN, ORIGIN).real == pytest.approx(1 / domain_volume(ellipsoid))


def test_moment_cache(ellipsoid, tmp_path):
    first = build_kernel_model(ellipsoid, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("moments-*.npz"))) == 1
    second = build_kernel_model(ellipsoid, cache_dir=tmp_path)
    assert np.array_equal(first.log_moments, second.log_moments)


def test_cutoff_grows_with_the_compactum(ball):
    assert select_cutoff(ball, 0.36) < select_cutoff(ball, 0.64)


def test_kernel_model_refusals(ellipsoid, halfspace):
    with pytest.raises(DomainInputError):
        build_kernel_model(halfspace)
    with pytest.raises(DomainInputError, match="ball only"):
        build_kernel_model(ellipsoid, mode="ball_closed_form")
    with pytest.raises(DomainInputError, match="Unknown kernel mode"):
        build_kernel_model(ellipsoid, mode="szego")
    big = DomainSpec(kind="ball", n=2, nbhd_width=0.3)
    with pytest.raises(AccuracyError):
        select_cutoff(big, 0.9999, tolerance=1e-300)


def test_quadrature(ball, ball_quadrature):
    assert ball_quadrature.total == pytest.approx(domain_volume(ball), rel=1e-2)
    assert len(ball_quadrature) >= 20_000


def test_projection_reproduces_constants(ball_kernel, ball_quadrature):
    at_origin = project(ball_kernel, ball_quadrature, np.ones(len(ball_quadrature)), ORIGIN)
    assert at_origin.value == pytest.approx(1.0, rel=1e-2)
    values = project(ball_kernel, ball_quadrature, lambda nodes: np.ones(len(nodes)), np.vstack([ORIGIN, 0.3 * np.eye(4)[0]]))
    assert len(values) == 2
    assert values[1].value.real == pytest.approx(1.0, rel=0.05)
    assert values[1].stderr > 0
    with pytest.raises(DomainInputError):
        project(ball_kernel, ball_quadrature, np.ones(3), ORIGIN)


def test_projection_reproduces_holomorphic_functions(ball_kernel, ball_quadrature):
    def z1(nodes):
        return nodes[:, 0] + 1j * nodes[:, 1]

    point = np.array([0.2, 0.1, 0.0, 0.0])
    value = project(ball_kernel, ball_quadrature, z1, point).value
    assert value == pytest.approx(0.2 + 0.1j, abs=0.02)


def test_kernel_tent_scan(ball_kernel, ball_family):
    scanner = KernelTentScanner(ball_kernel, ball_family, seed=0)
    report = kernel_tent_bound_scan(ball_kernel, ball_family, pairs=12, seed=0, scanner=scanner)
    assert report.pairs + len(report.skipped) == 12
    assert report.pairs > 0
    assert math.isfinite(report.A)
    assert all(row.bound > 0 for row in report.rows)
    for row in report.rows:
        if not row.root:
            assert row.level in ball_family.grids[row.grid_index].levels
    assert report.rho_lower_ratio > 0
    rungs = report.by_rung(scanner.top)
    assert set(rungs) <= {0, 1, 2, 3}


def test_deep_pairs_use_the_root_tent(ball_kernel, ball_family):
    scanner = KernelTentScanner(ball_kernel, ball_family)
    row, base = scanner.pair(ORIGIN, ORIGIN)
    assert row.root
    assert base is None
    assert row.bound == pytest.approx(abs(kernel(ball_kernel, ORIGIN, ORIGIN)) * domain_volume(ball_family.domain))
