import math

import numpy as np
import pytest

from dyadic_flow_tents.domain_model import defining_function, sample_band
from dyadic_flow_tents.exceptions import BandExitError, ConfigurationError, DomainInputError
from dyadic_flow_tents.extremal_basis import extremal_frame
from dyadic_flow_tents.flow_tents import (
    FlowIntegrator,
    Tent,
    bergman_flow_tree,
    flow,
    flow_project,
    flow_trajectory,
    locate_whitney_piece,
    nearest_project,
    point_tent_contains,
    stable_scale,
    tent_contains,
    tent_contains_many,
    tent_decomposition_check,
    tent_equivalence_scan,
    threshold_ladder,
    tree_matches_grid,
    whitney_decompose,
    whitney_level,
)

E1 = np.array([1.0, 0.0, 0.0, 0.0])


@pytest.mark.parametrize("name", ["ball", "ellipsoid", "halfspace"])
def test_flow_lowers_r_at_unit_rate(name, request):
    domain = request.getfixturevalue(name)
    rng = np.random.default_rng(0)
    z = sample_band(domain, 50, rng, lower=-0.1, upper=0.0)
    t = rng.uniform(0.0, 0.1, size=50)
    phi = flow(domain, z, t)
    assert np.max(np.abs(defining_function(domain, phi) - defining_function(domain, z) + t)) <= 1e-8


def test_ball_flow_is_radial(ball):
    z = np.array([0.6, 0.0, 0.0, 0.8])
    phi = flow(ball, z, 0.1)
    # |phi|^2 = |z|^2 - 2t along the ray through z
    assert np.linalg.norm(phi) == pytest.approx(math.sqrt(1.0 - 0.2), abs=1e-10)
    assert np.allclose(phi / np.linalg.norm(phi), z)


def test_flow_runs_backwards(ball):
    inside = flow(ball, E1, 0.1)
    assert np.allclose(flow(ball, inside, -0.1), E1, atol=1e-9)
    assert np.array_equal(flow(ball, E1, 0.0), E1)


def test_flow_stays_in_the_band(ball):
    with pytest.raises(BandExitError) as excinfo:
        flow(ball, E1, 0.5)
    assert np.allclose(excinfo.value.last_state, E1)


def test_trajectory(ball):
    states = flow_trajectory(ball, E1, [0.0, 0.05, 0.1], FlowIntegrator(step_size=1e-3))
    assert states.shape == (3, 1, 4)
    assert defining_function(ball, states[2, 0]) == pytest.approx(-0.1, abs=1e-10)
    with pytest.raises(ConfigurationError):
        flow_trajectory(ball, E1, [0.1, 0.0])


def test_projections_agree_on_the_ball(ball):
    z = 0.9 * np.array([0.0, 0.6, 0.8, 0.0])
    assert np.allclose(flow_project(ball, z), z / 0.9, atol=1e-9)
    assert np.allclose(nearest_project(ball, z), z / 0.9, atol=1e-9)
    with pytest.raises(DomainInputError):
        flow_project(ball, 1.1 * E1)


def test_projections_differ_on_the_ellipsoid(ellipsoid):
    z = np.array([0.7, 0.0, 0.6, 0.0])
    by_flow = flow_project(ellipsoid, z)
    nearest = nearest_project(ellipsoid, z)
    assert abs(defining_function(ellipsoid, by_flow)) < 1e-9
    assert abs(defining_function(ellipsoid, nearest)) < 1e-12
    # flow lines bend where the level sets are not spheres
    assert not np.allclose(by_flow, nearest, atol=1e-6)
    assert np.linalg.norm(z - nearest) < np.linalg.norm(z - by_flow)


def test_tent_membership(ball_grid):
    level = ball_grid.n0
    center = ball_grid.sample.points[ball_grid.centers[0][0]]
    inside = flow(ball_grid.sample.domain, center, 0.5 * ball_grid.sidelength(level))
    tent = Tent(ball_grid.grid_index, level, 0)
    assert tent_contains(ball_grid, tent, inside)
    assert not tent_contains(ball_grid, Tent(ball_grid.grid_index, level, 1), inside)
    # above the tent's height and outside the domain
    deep = flow(ball_grid.sample.domain, center, 1.5 * ball_grid.sidelength(level))
    assert not tent_contains(ball_grid, tent, deep)
    assert not tent_contains(ball_grid, tent, 1.01 * center)
    assert tent_contains_many(ball_grid, Tent(0, None, None), np.vstack([deep, inside])).all()


def test_tent_flavors_coincide_on_the_ball(ball_grid):
    domain = ball_grid.sample.domain
    rng = np.random.default_rng(2)
    z = sample_band(domain, 200, rng, lower=-ball_grid.sidelength(ball_grid.n0), upper=0.0)
    level = ball_grid.n0 + 1
    for index in range(3):
        by_flow = tent_contains_many(ball_grid, Tent(0, level, index, "flow"), z)
        by_proj = tent_contains_many(ball_grid, Tent(0, level, index, "proj"), z)
        assert np.array_equal(by_flow, by_proj)


def test_whitney_decomposition(ball_grid):
    dec = whitney_decompose(ball_grid, ball_grid.sample.domain, ball_grid.n0, samples=2000, seed=0)
    assert len(dec.pieces) == ball_grid.cube_count(ball_grid.n0)
    assert dec.counts.sum() == 2000
    assert dec.unambiguous_fraction >= 0.999
    top, bottom = dec.pieces[0].layer
    assert top == pytest.approx(-ball_grid.sidelength(ball_grid.n0))
    assert defining_function(ball_grid.sample.domain, dec.pieces[0].center) == pytest.approx(top, abs=1e-9)
    with pytest.raises(ConfigurationError):
        whitney_decompose(ball_grid, ball_grid.sample.domain, ball_grid.n0 - 1)


def test_whitney_levels(ball_grid):
    ell = ball_grid.sidelength(ball_grid.n0)
    assert whitney_level(ball_grid, 2 * ell) is None
    assert whitney_level(ball_grid, ell) == ball_grid.n0
    assert whitney_level(ball_grid, 0.75 * ell) == ball_grid.n0
    assert whitney_level(ball_grid, 0.5 * ell) == ball_grid.n0 + 1


def test_locate_whitney_piece(ball_grid):
    domain = ball_grid.sample.domain
    foot_index = ball_grid.centers[0][0]
    z = flow(domain, ball_grid.sample.points[foot_index], 0.75 * ball_grid.sidelength(ball_grid.n0))
    where = locate_whitney_piece(ball_grid, z)
    assert (where.level, where.index) == (ball_grid.n0, 0)
    assert locate_whitney_piece(ball_grid, np.zeros(4)).is_root
    deep = locate_whitney_piece(ball_grid, flow(domain, ball_grid.sample.points[0], 1e-4))
    assert deep.beyond_finest
    assert deep.level == ball_grid.finest


def test_flow_tree_follows_the_grid(ball_grid):
    tree = bergman_flow_tree(ball_grid)
    assert tree_matches_grid(tree, ball_grid)
    assert len(tree.nodes) == 1 + sum(ball_grid.cube_count(k) for k in ball_grid.levels)
    tree.parent[(ball_grid.finest, 0)] = None
    assert not tree_matches_grid(tree, ball_grid)


def test_tent_decomposition(ball_grid):
    assert tent_decomposition_check(ball_grid, ball_grid.n0, 0, samples=200, seed=1) >= 0.99


def test_tent_equivalence_on_the_ball(ball, tau_config):
    report = tent_equivalence_scan(ball, E1, [2.0 ** -5], samples=40, seed=0, config=tau_config)
    assert report.eps == [2.0 ** -5]
    assert report.samples == 80
    assert report.valid
    # both projections follow the radius
    assert report.c1 <= 1.2
    assert report.displacement_rate < 1e-3


def test_tent_equivalence_needs_a_boundary_point(ball):
    with pytest.raises(DomainInputError):
        tent_equivalence_scan(ball, 0.5 * E1, [0.01])


@pytest.mark.parametrize("flavor", ["flow", "proj"])
def test_tents_over_a_boundary_point(ball, tau_config, flavor):
    frame = extremal_frame(ball, E1, 0.01, config=tau_config)
    shallow = flow(ball, E1, 0.005)
    deep = flow(ball, E1, 0.02)
    inside = point_tent_contains(ball, frame, np.vstack([shallow, deep]), flavor)
    assert inside.tolist() == [True, False]
    # the dilated tent reaches three times as deep
    assert point_tent_contains(ball, frame, deep, flavor, dilation=3.0).all()


def test_threshold_ladder(ball):
    assert threshold_ladder(ball, 3) == pytest.approx([0.15, 0.075, 0.0375])
    with pytest.raises(ConfigurationError):
        threshold_ladder(ball, 1)


@pytest.mark.parametrize(
    "constants, expected",
    [
        ([1.3, 1.05, 1.02, 1.0], 0.5),
        ([1.0, 1.0, 1.0, 1.0], 1.0),
        ([1.0, 1.0, 1.5, 1.0], None),
        ([1.0, math.inf, 1.0, 1.0], 0.25),
    ],
)
def test_stable_scale(constants, expected):
    scales = [1.0, 0.5, 0.25, 0.125]
    assert stable_scale(scales, constants, spread=1.1) == expected


def test_stable_scale_ceiling():
    assert stable_scale([0.2, 0.1], [2.5, 2.5], spread=1.1) == 0.2
    assert stable_scale([0.2, 0.1], [2.5, 2.5], spread=1.1, ceiling=2.0) is None
