from .domain_model import (
    DomainSpec,
    defining_function,
    gradient,
    hessian,
)
from .extremal_basis import (
    EpsLadder,
    QuasimetricOracle,
    extremal_frame,
    rho,
    tau,
)
from .boundary_sht import (
    GridFamily,
    build_adjacent_family,
    build_grid,
    sample_boundary,
)
from .flow_tents import (
    FlowIntegrator,
    Tent,
    flow,
    tent_contains,
)
from .level_set_geometry import (
    mean_curvature,
    tent_volume,
)
from .bergman import (
    build_kernel_model,
    build_quadrature,
    kernel,
)
from .sparse_weighted import (
    TentBasis,
    WeightModel,
    maximal,
    sparse_apply,
)
from .suite_manager import (
    SuiteConfig,
    SuiteManager,
)
