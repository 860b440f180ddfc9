import math

import numpy as np
import pytest

from dyadic_flow_tents.boundary_sht import (
    GridFamily,
    build_adjacent_family,
    build_grid,
    check_delta_conditions,
    find_containing_cube,
    first_level,
    minimal_stride,
    sample_boundary,
    sphere_area,
    verify_grid,
)
from dyadic_flow_tents.domain_model import defining_function
from dyadic_flow_tents.exceptions import ConfigurationError, DomainInputError


def test_sample_boundary_on_the_ball(ball_sample):
    assert len(ball_sample) == 500
    assert np.all(np.abs(defining_function(ball_sample.domain, ball_sample.points)) < 1e-9)
    # every ray meets the sphere at radius one, so the weights are exact
    assert ball_sample.total_mass == pytest.approx(sphere_area(2))
    assert sphere_area(2) == pytest.approx(2 * math.pi ** 2)


def test_sample_boundary_is_seeded(ball):
    a = sample_boundary(ball, 500, seed=7)
    b = sample_boundary(ball, 500, seed=7)
    assert np.array_equal(a.points, b.points)


def test_refined_weights_keep_the_area(ellipsoid):
    plain = sample_boundary(ellipsoid, 500, seed=1)
    refined = sample_boundary(ellipsoid, 500, seed=1, refinement=2)
    assert np.array_equal(plain.points, refined.points)
    assert refined.total_mass == pytest.approx(plain.total_mass, rel=0.1)


def test_sample_boundary_refusals(ball, halfspace):
    with pytest.raises(ConfigurationError):
        sample_boundary(ball, 100)
    with pytest.raises(DomainInputError, match="unbounded"):
        sample_boundary(halfspace, 500)


@pytest.mark.parametrize(
    "delta, kappa, c_omega, condition",
    [
        (0.125, 1.0, None, "(a)"),
        (0.005, None, 3.0, "(b)"),
        (0.02, None, None, "(a)"),
        (1.0, None, None, "delta"),
    ],
)
def test_delta_conditions(delta, kappa, c_omega, condition):
    with pytest.raises(ConfigurationError) as excinfo:
        check_delta_conditions(delta, kappa, c_omega)
    assert excinfo.value.condition == condition


def test_minimal_stride():
    # 96 * 2^-N <= 1 first holds at N = 7
    assert minimal_stride(0.5, kappa=1.0) == 7
    assert minimal_stride(0.5, kappa=1.0, c_omega=1.0) == 7
    # an unknown kappa counts as 1
    assert minimal_stride(0.5) == 7
    check_delta_conditions(0.5 ** 7, 1.0, 1.0)


def test_first_level(ball):
    # flow band 0.15 for nbhd_width 0.3
    assert first_level(ball, 0.5) == 3
    assert first_level(ball, 0.5, thresholds=[0.05]) == 5
    assert first_level(ball, 0.5, thresholds=[0.05, 0.2]) == 5


def test_grid_axioms(ball_family, ball_oracle):
    R = ball_oracle.rho_matrix()
    for grid in ball_family.grids:
        assert verify_grid(grid, R).axiom_violations == 0
        assert grid.n0 == 3
        assert grid.finest == 6
        assert math.isfinite(grid.frakC)
        assert 0 < grid.eps_grid <= 1


def test_grid_nesting(ball_grid):
    for level in ball_grid.levels:
        counts = np.bincount(ball_grid.labels_at(level), minlength=ball_grid.cube_count(level))
        assert np.all(counts > 0)
        assert ball_grid.masses(level).sum() == pytest.approx(ball_grid.sample.total_mass)
        if level > ball_grid.n0:
            parents = np.array([ball_grid.parent(level, i) for i in range(ball_grid.cube_count(level))])
            assert np.array_equal(parents[ball_grid.labels_at(level)], ball_grid.labels_at(level - 1))
    assert ball_grid.cube_count(ball_grid.finest) >= ball_grid.cube_count(ball_grid.n0)


def test_cube_navigation(ball_grid):
    level = ball_grid.n0 + 1
    cube = ball_grid.cube(level, 0)
    assert cube.parent == (ball_grid.grid_index, level - 1, ball_grid.parent(level, 0))
    chain = ball_grid.ancestors(ball_grid.finest, 0)
    assert [lvl for lvl, _ in chain] == list(reversed(ball_grid.levels))
    assert chain[-2][1] in ball_grid.children(*chain[-1])
    members = ball_grid.members(ball_grid.finest, 0)
    assert ball_grid.smallest_containing(members) == (ball_grid.finest, 0)


def test_family(ball_family):
    assert len(ball_family.grids) == 3
    assert ball_family.seeds == [0, 1, 2]
    assert ball_family.valid
    assert ball_family.tested_balls == 200 * 6
    assert 0 < ball_family.frakC_tilde < math.inf
    assert len({tuple(g.centers[0]) for g in ball_family.grids}) > 1


def test_family_file(ball_family, family_file, tau_config):
    loaded = GridFamily.load(family_file, tau_config)
    assert loaded.domain == ball_family.domain
    assert loaded.frakC_tilde == ball_family.frakC_tilde
    for a, b in zip(loaded.grids, ball_family.grids):
        for level in a.levels:
            assert np.array_equal(a.labels_at(level), b.labels_at(level))
    assert np.array_equal(loaded.oracle.eps, ball_family.oracle.eps)


def test_unreadable_family_file(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text("{not json")
    with pytest.raises(DomainInputError, match="Cannot read grid file"):
        GridFamily.load(path)


def test_find_containing_cube(ball_family):
    top = ball_family.grids[0].sidelength(ball_family.n0)
    assert find_containing_cube(ball_family, ball_family.sample.points[0], top).root
    # below the first rung the ball holds only its center
    match = find_containing_cube(ball_family, ball_family.sample.points[0], ball_family.oracle.eps[0], center_index=0)
    assert not match.root
    assert match.level == ball_family.grids[0].finest
    grid = ball_family.grids[match.grid_index]
    assert 0 in grid.members(match.level, match.index)


def test_grid_refusals(ball_sample, ball_oracle):
    with pytest.raises(ConfigurationError, match="depth"):
        build_grid(ball_sample, ball_oracle, 0.5, 2, seed=0)
    with pytest.raises(ConfigurationError) as excinfo:
        build_grid(ball_sample, ball_oracle, 0.5, 3, seed=0, stride=1, kappa=1.0)
    assert excinfo.value.condition == "(a)"
    # no kappa supplied: the floor kappa = 1 still refuses ratio 1/2
    with pytest.raises(ConfigurationError) as excinfo:
        build_grid(ball_sample, ball_oracle, 0.5, 3, seed=0, stride=1)
    assert excinfo.value.condition == "(a)"
    with pytest.raises(ConfigurationError, match="seeds"):
        build_adjacent_family(ball_sample, ball_oracle, 0.5, 3, k0=3, seeds=[0, 1])


def test_diagnostic_grids_carry_a_warning(ball_family):
    for grid in ball_family.grids:
        assert grid.stride == 1
        assert any("condition (a)" in w for w in grid.warnings)


def test_automatic_stride_coarsens_the_ratio(ball_sample, ball_oracle):
    grid = build_grid(ball_sample, ball_oracle, 0.5, 3, seed=0)
    assert grid.stride == 7
    assert grid.delta == pytest.approx(0.5 ** 7)
    check_delta_conditions(grid.delta)
    assert not any("Diagnostic" in w for w in grid.warnings)


def test_calibrated_thresholds_raise_the_first_level(ball_sample, ball_oracle):
    plain = build_grid(ball_sample, ball_oracle, 0.5, 3, seed=0, stride=1, enforce_conditions=False)
    lowered = build_grid(
        ball_sample, ball_oracle, 0.5, 3, seed=0, stride=1, enforce_conditions=False, thresholds=[0.075]
    )
    assert plain.n0 == 3
    assert lowered.n0 == 4
    assert lowered.sidelength(lowered.n0) <= 0.075
