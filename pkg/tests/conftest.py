from pathlib import Path
import shutil
import tempfile

import pytest

from dyadic_flow_tents.bergman import build_kernel_model, build_quadrature
from dyadic_flow_tents.boundary_sht import build_adjacent_family, sample_boundary
from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.extremal_basis import EpsLadder, QuasimetricOracle, TauConfig
from dyadic_flow_tents.sparse_weighted import TentBasis

# A coarse scale ladder keeps the frame ladders of a 500-point sample cheap.
COARSE_LADDER = EpsLadder(minimum=1e-3, ratio=2.0 ** 0.25)
COARSE_TAU = TauConfig(angles=32, radial=17)


@pytest.fixture(scope="function")
def test_directory():
    """Fixture to create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture(scope="session")
def ball():
    return DomainSpec(kind="ball", n=2, nbhd_width=0.3)


@pytest.fixture(scope="session")
def ellipsoid():
    return DomainSpec(kind="ellipsoid", n=2, exponents=(1, 2), nbhd_width=0.3)


@pytest.fixture(scope="session")
def halfspace():
    return DomainSpec(kind="halfspace", n=2, nbhd_width=0.3)


@pytest.fixture(scope="session")
def tau_config():
    return COARSE_TAU


@pytest.fixture(scope="session")
def ball_sample(ball):
    return sample_boundary(ball, 500, seed=0)


@pytest.fixture(scope="session")
def ball_oracle(ball, ball_sample):
    oracle = QuasimetricOracle(ball, ball_sample.points, COARSE_LADDER, COARSE_TAU, seed=0)
    oracle.precompute()
    return oracle


@pytest.fixture(scope="session")
def ball_family(ball_sample, ball_oracle):
    """Three diagnostic grids of ratio 1/2 on the unit ball in C^2, levels 3..6.

    Ratio 1/2 violates condition (a); a 500-point sample cannot resolve admissible ratios.
    """
    return build_adjacent_family(
        ball_sample, ball_oracle, 0.5, 3, k0=3, seeds=[0, 1, 2], stride=1, enforce_conditions=False
    )


@pytest.fixture(scope="session")
def ball_grid(ball_family):
    return ball_family.grids[0]


@pytest.fixture(scope="session")
def family_file(ball_family, tmp_path_factory):
    path = tmp_path_factory.mktemp("grids") / "grid.json"
    ball_family.dump(path)
    return path


@pytest.fixture(scope="session")
def ball_kernel(ball):
    return build_kernel_model(ball)


@pytest.fixture(scope="session")
def ball_quadrature(ball):
    return build_quadrature(ball, nodes=20_000, seed=0)


@pytest.fixture(scope="session")
def tent_basis(ball_family, ball_quadrature):
    return TentBasis(ball_family, ball_quadrature)
