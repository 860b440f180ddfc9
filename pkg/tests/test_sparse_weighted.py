import math

import numpy as np
import pytest

from dyadic_flow_tents.bergman import build_quadrature
from dyadic_flow_tents.exceptions import ConfigurationError, DomainInputError
from dyadic_flow_tents.flow_tents import Tent, flow
from dyadic_flow_tents.sparse_weighted import (
    TentBasis,
    WeightModel,
    ap_constant,
    average,
    containing_tents,
    dictionary,
    maximal,
    sparse_apply,
    sparse_domination_check,
    sparse_many,
    weighted_slope_experiment,
)


@pytest.fixture
def band_point(tent_basis):
    sample = tent_basis.family.sample
    return flow(tent_basis.domain, sample.points[0], 0.5 * tent_basis.top)


def ones(nodes):
    return np.ones(len(nodes))


def test_basis_locates_band_nodes(tent_basis):
    assert np.all(tent_basis.depth > 0)
    near = tent_basis.depth < tent_basis.top
    assert np.all(tent_basis.foot[near] >= 0)
    assert np.all(tent_basis.foot[~near] == -1)
    with pytest.raises(DomainInputError):
        tent_basis.locate(np.array([1.1, 0.0, 0.0, 0.0]))


def test_averages_of_constants(tent_basis, band_point):
    assert average(ones, Tent(0, None, None), tent_basis) == pytest.approx(1.0)
    assert maximal(ones, band_point, tent_basis) == pytest.approx(1.0)
    table = tent_basis.table(ones)
    for (g, level), values in table.levels.items():
        filled = values[~np.isnan(values)]
        assert np.allclose(filled, 1.0)


def test_containing_tents(tent_basis, band_point):
    chain = containing_tents(tent_basis, band_point)
    assert chain[0].is_root
    assert len(chain) > 1
    for tent in chain[1:]:
        assert tent.level in tent_basis.family.grids[tent.grid_index].levels


def test_sparse_apply_counts_every_grid_root(tent_basis, band_point):
    result = sparse_apply(ones, band_point, tent_basis)
    k0 = len(tent_basis.family.grids)
    assert [t.grid_index for t in result.contributors[:k0]] == list(range(k0))
    assert all(t.is_root for t in result.contributors[:k0])
    assert k0 <= result.value <= len(result.contributors)


def test_weight_model():
    with pytest.raises(ConfigurationError):
        WeightModel("gaussian")
    assert WeightModel("power", 0.4).dual(2.0).alpha == pytest.approx(-0.4)
    assert WeightModel("constant").dual(3.0).kind == "constant"
    assert WeightModel("power", -1.0).divergent(2.0)
    assert WeightModel("power", 1.0).divergent(2.0)
    assert not WeightModel("power", 0.5).divergent(2.0)
    assert not WeightModel("constant").divergent(1.5)


def test_weight_values_follow_the_basis(ball, ball_family, tent_basis):
    weight = WeightModel("power", 0.3)
    first = weight.on_nodes(tent_basis)
    other = TentBasis(ball_family, build_quadrature(ball, nodes=2000, seed=1))
    values = weight.on_nodes(other)
    assert len(values) == len(other.quad)
    assert np.array_equal(values, other.depth ** 0.3)
    assert weight.on_nodes(tent_basis) is first


def test_ap_constant_of_a_constant_weight(tent_basis):
    report = ap_constant(WeightModel("constant"), 2.0, tent_basis)
    assert report.constant == pytest.approx(1.0)
    assert report.duality_gap < 1e-10


@pytest.mark.parametrize("alpha, p", [(0.2, 2.0), (-0.3, 3.0), (0.3, 1.5)])
def test_ap_duality(tent_basis, alpha, p):
    report = ap_constant(WeightModel("power", alpha), p, tent_basis)
    # Jensen puts every tent at or above one
    assert report.constant >= 1.0 - 1e-12
    assert report.argmax is not None
    assert report.duality_gap < 1e-10


def test_ap_constant_of_a_divergent_weight(tent_basis):
    report = ap_constant(WeightModel("power", -1.0), 2.0, tent_basis)
    assert report.divergent
    assert report.constant == math.inf
    with pytest.raises(ConfigurationError):
        ap_constant(WeightModel("constant"), 1.0, tent_basis)


def test_dictionary_is_nonnegative(tent_basis):
    functions = dictionary(tent_basis, np.random.default_rng(0), count=9)
    assert "one" in functions
    assert any(name.startswith("bump:") for name in functions)
    assert all(np.all(values >= 0) for values in functions.values())


def test_sparse_domination(ball_kernel, tent_basis):
    report = sparse_domination_check(ball_kernel, tent_basis, seed=0, count=6, rungs=2, per_rung=3)
    assert not report.violations
    assert len(report.rows) == 7 * 6
    assert 0 < report.constant < math.inf
    assert set(report.rung_maxima()) == {0, 1}


def test_sparse_domination_needs_nonnegative_functions(ball_kernel, tent_basis):
    functions = {"negative": -np.ones(len(tent_basis.quad))}
    with pytest.raises(DomainInputError, match="nonnegative"):
        sparse_domination_check(ball_kernel, tent_basis, functions=functions, rungs=1, per_rung=1)


def test_weighted_slope(ball_kernel, tent_basis):
    report = weighted_slope_experiment(ball_kernel, tent_basis, 2.0, [-1.0, -0.2, 0.0, 0.2], trials=6, eval_nodes=300)
    assert [row.alpha for row in report.rows] == [-0.2, 0.0, 0.2]
    assert ("divergent_weight", "alpha=-1") in report.flagged
    assert report.rows[1].ap_constant == pytest.approx(1.0)
    assert all(row.norm_lower_bound > 0 for row in report.rows)
    assert math.isfinite(report.slope)
    assert report.bound == 1.0


def test_weighted_slope_needs_p_above_one(ball_kernel, tent_basis):
    with pytest.raises(ConfigurationError):
        weighted_slope_experiment(ball_kernel, tent_basis, 1.0, [0.0])


def test_sparse_many_matches_pointwise_evaluation(tent_basis, band_point):
    values = tent_basis.quad.nodes[:, 0] ** 2
    deeper = flow(tent_basis.domain, tent_basis.family.sample.points[5], 0.25 * tent_basis.top)
    points = np.vstack([band_point, deeper])
    many = sparse_many(values, points, tent_basis)
    single = [sparse_apply(values, p, tent_basis).value for p in points]
    assert np.allclose(many, single)
