"""Normal gradient flow, boundary projections, flow/projection tents and Whitney pieces."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from prometheus_client import Counter

from dyadic_flow_tents.boundary_sht import DyadicCube, DyadicGrid
from dyadic_flow_tents.domain_model import (
    DomainSpec,
    as_points,
    boundary_radius,
    defining_function,
    gradient,
    hessian,
    ray_project,
    samples_discarded,
    unit_normal,
)
from dyadic_flow_tents.exceptions import (
    BandExitError,
    ConfigurationError,
    DomainInputError,
    DyadicError,
    IntegrationError,
    ProjectionError,
)
from dyadic_flow_tents.extremal_basis import ExtremalFrame, TauConfig, extremal_frame, polydisc_contains

if TYPE_CHECKING:
    from dyadic_flow_tents.level_set_geometry import VolumeEstimate

logger = logging.getLogger(__name__)

FLAVORS = ("flow", "proj")

flow_integrations = Counter(
    "dyadic_flow_integrations",
    "Gradient flow integrations by outcome",
    ["outcome"],
)


@dataclass
class FlowIntegrator:
    """Classical RK4 settings; ``max_time`` defaults to the domain's flow band."""

    step_size: float = 1e-3
    max_time: Optional[float] = None
    tolerance: float = 1e-10
    max_steps: int = 2 ** 14

    def band(self, domain: DomainSpec) -> float:
        return self.max_time if self.max_time is not None else domain.flow_band


def _flow_field(domain: DomainSpec, y: np.ndarray, durations: np.ndarray) -> np.ndarray:
    g = gradient(domain, y)
    return -durations[:, None] * g / np.sum(g * g, axis=1, keepdims=True)


def _rk4(domain: DomainSpec, y: np.ndarray, durations: np.ndarray, steps: int) -> np.ndarray:
    h = 1.0 / steps
    for _ in range(steps):
        k1 = _flow_field(domain, y, durations)
        k2 = _flow_field(domain, y + 0.5 * h * k1, durations)
        k3 = _flow_field(domain, y + 0.5 * h * k2, durations)
        k4 = _flow_field(domain, y + h * k3, durations)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def _check_band(domain: DomainSpec, z: np.ndarray, r0: np.ndarray, target: np.ndarray) -> None:
    width = domain.nbhd_width * (1.0 + 1e-12)
    outside = (np.abs(r0) > width) | (np.abs(target) > width)
    if np.any(outside):
        flow_integrations.labels(outcome="band_exit").inc(int(outside.sum()))
        first = int(np.flatnonzero(outside)[0])
        raise BandExitError(
            f"Flow from r={r0[first]:.6g} to r={target[first]:.6g} leaves the band |r| < {domain.nbhd_width}",
            last_state=z[first].copy(),
        )


def flow(domain: DomainSpec, z, t, integrator: Optional[FlowIntegrator] = None) -> np.ndarray:
    """phi(z, t) for the field -grad r/|grad r|^2, so that r decreases at unit rate.

    Accepts one point or a stack of points; ``t`` is a scalar or one time per point.
    Negative times run the flow backwards.
    """
    integrator = integrator or FlowIntegrator()
    z = as_points(domain, z)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    durations = np.broadcast_to(np.asarray(t, dtype=float), (len(pts),)).copy()
    r0 = defining_function(domain, pts)
    target = r0 - durations
    _check_band(domain, pts, r0, target)

    longest = float(np.max(np.abs(durations))) if len(pts) else 0.0
    if longest == 0.0:
        return z.copy()
    steps = max(1, int(math.ceil(longest / integrator.step_size)))
    while True:
        out = _rk4(domain, pts, durations, steps)
        residual = np.abs(defining_function(domain, out) - target)
        if np.all(np.isfinite(out)) and residual.max() <= integrator.tolerance:
            break
        if 2 * steps > integrator.max_steps:
            raise IntegrationError(
                f"Flow residual {residual.max():.3g} above {integrator.tolerance} after {steps} steps"
            )
        steps *= 2
    flow_integrations.labels(outcome="ok").inc(len(pts))
    return out[0] if single else out


def flow_trajectory(
    domain: DomainSpec,
    z,
    times: Sequence[float],
    integrator: Optional[FlowIntegrator] = None,
) -> np.ndarray:
    """States at increasing ``times`` (starting at 0) with one fixed step size throughout.

    Errors of fixed-step integration vary smoothly with the start point and the time,
    which is what finite differences of the flow need. Shape ``(len(times), m, 2n)``.
    """
    integrator = integrator or FlowIntegrator()
    pts = np.atleast_2d(as_points(domain, z))
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) < 0):
        raise ConfigurationError("Trajectory times must start at 0 and increase", "times")
    r0 = defining_function(domain, pts)
    _check_band(domain, pts, r0, r0 - times[-1])
    states = np.empty((len(times),) + pts.shape)
    states[0] = pts
    y = pts
    for i in range(1, len(times)):
        span = times[i] - times[i - 1]
        if span == 0.0:
            states[i] = y
            continue
        steps = max(1, int(math.ceil(span / integrator.step_size)))
        y = _rk4(domain, y, np.full(len(y), span), steps)
        states[i] = y
    flow_integrations.labels(outcome="ok").inc(len(pts))
    return states


def flow_project(domain: DomainSpec, z, integrator: Optional[FlowIntegrator] = None) -> np.ndarray:
    """Pi^flow: follow the reversed field for time |r(z)| back to the boundary."""
    z = as_points(domain, z)
    pts = np.atleast_2d(z)
    r0 = defining_function(domain, pts)
    if np.any(r0 > 1e-12):
        raise DomainInputError("flow_project takes points of the closed domain")
    out = flow(domain, pts, r0, integrator)
    return out[0] if z.ndim == 1 else out


def nearest_project_many(
    domain: DomainSpec,
    z,
    max_iter: int = 200,
    integrator: Optional[FlowIntegrator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest boundary points by Newton iteration on the Lagrange system.

    Starts from the flow projection inside the band and from the radial projection
    elsewhere. Returns the points and a convergence mask.
    """
    pts = np.atleast_2d(as_points(domain, z)).astype(float)
    size, dim = pts.shape
    r0 = defining_function(domain, pts)
    w = np.empty_like(pts)
    inside = (r0 <= 0) & (r0 >= -domain.nbhd_width)
    if np.any(~inside):
        w[~inside] = ray_project(domain, pts[~inside])
    if np.any(inside):
        w[inside] = flow(domain, pts[inside], r0[inside], integrator)
    g = gradient(domain, w)
    mu = -np.sum((w - pts) * g, axis=1) / np.sum(g * g, axis=1)
    converged = np.zeros(size, dtype=bool)
    eye = np.eye(dim)
    for _ in range(max_iter):
        g = gradient(domain, w)
        rv = defining_function(domain, w)
        diff = w - pts
        nu = g / np.linalg.norm(g, axis=1, keepdims=True)
        tangential = np.linalg.norm(diff - np.sum(diff * nu, axis=1, keepdims=True) * nu, axis=1)
        converged |= (np.abs(rv) <= 1e-12) & (tangential <= 1e-10)
        active = ~converged
        if not np.any(active):
            break
        H = hessian(domain, w[active])
        J = np.zeros((int(active.sum()), dim + 1, dim + 1))
        J[:, :dim, :dim] = eye + mu[active, None, None] * H
        J[:, :dim, dim] = g[active]
        J[:, dim, :dim] = g[active]
        rhs = -np.concatenate([diff[active] + mu[active, None] * g[active], rv[active, None]], axis=1)
        try:
            step = np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        w[active] += step[:, :dim]
        mu[active] += step[:, dim]
    return w, converged


def nearest_project(domain: DomainSpec, z, max_iter: int = 200) -> np.ndarray:
    """Pi^proj: the nearest point of the boundary."""
    z = as_points(domain, z)
    w, converged = nearest_project_many(domain, z, max_iter)
    if not np.all(converged):
        raise ProjectionError(f"Nearest point projection did not converge in {max_iter} iterations")
    return w[0] if z.ndim == 1 else w


def project(domain: DomainSpec, z, flavor: str, integrator: Optional[FlowIntegrator] = None) -> np.ndarray:
    if flavor == "flow":
        return flow_project(domain, z, integrator)
    if flavor == "proj":
        return nearest_project(domain, z)
    raise ConfigurationError(f"Unknown tent flavor {flavor!r}", "flavor")


@dataclass
class Tent:
    """A dyadic tent over a cube of one grid; ``level=None`` is the root tent (the domain)."""

    grid_index: int
    level: Optional[int]
    index: Optional[int]
    flavor: str = "flow"
    height: Optional[float] = None
    volume: Optional["VolumeEstimate"] = None

    @property
    def is_root(self) -> bool:
        return self.level is None

    @property
    def key(self) -> Tuple[int, Optional[int], Optional[int], str, Optional[float]]:
        return (self.grid_index, self.level, self.index, self.flavor, self.height)

    def resolved_height(self, grid: DyadicGrid) -> float:
        if self.is_root:
            return math.inf
        return self.height if self.height is not None else grid.sidelength(self.level)


def tent_contains_many(
    grid: DyadicGrid,
    tent: Tent,
    z,
    integrator: Optional[FlowIntegrator] = None,
) -> np.ndarray:
    domain = grid.sample.domain
    pts = np.atleast_2d(as_points(domain, z))
    rv = defining_function(domain, pts)
    if tent.is_root:
        return rv < 0
    height = tent.resolved_height(grid)
    candidates = (rv > -height) & (rv < 0)
    inside = np.zeros(len(pts), dtype=bool)
    if np.any(candidates):
        landing = np.atleast_2d(project(domain, pts[candidates], tent.flavor, integrator))
        owner = grid.sample.nearest(landing)
        inside[candidates] = grid.labels_at(tent.level)[owner] == tent.index
    return inside


def tent_contains(
    grid: DyadicGrid,
    cube: Union[DyadicCube, Tent],
    z,
    flavor: str = "flow",
    integrator: Optional[FlowIntegrator] = None,
) -> bool:
    if isinstance(cube, DyadicCube):
        cube = Tent(grid_index=cube.id[0], level=cube.level, index=cube.id[2], flavor=flavor)
    return bool(tent_contains_many(grid, cube, z, integrator)[0])


def point_tent_contains(
    domain: DomainSpec,
    frame: ExtremalFrame,
    z,
    flavor: str,
    dilation: float = 1.0,
    integrator: Optional[FlowIntegrator] = None,
) -> np.ndarray:
    """Membership in the tents ``T_eps(zeta)`` / ``T^flow_eps(zeta)`` over the frame's polydisc."""
    pts = np.atleast_2d(as_points(domain, z))
    rv = defining_function(domain, pts)
    candidates = (rv > -dilation * frame.eps) & (rv < 0)
    inside = np.zeros(len(pts), dtype=bool)
    if np.any(candidates):
        landing = np.atleast_2d(project(domain, pts[candidates], flavor, integrator))
        inside[candidates] = np.atleast_1d(polydisc_contains(frame, landing, dilation))
    return inside


@dataclass
class WhitneyPiece:
    grid_index: int
    level: int
    index: int
    layer: Tuple[float, float]
    center: np.ndarray


@dataclass
class WhitneyDecomposition:
    level: int
    pieces: List[WhitneyPiece]
    scanned: int
    ambiguous: int
    counts: np.ndarray

    @property
    def unambiguous_fraction(self) -> float:
        return 1.0 - self.ambiguous / max(self.scanned, 1)


def layer_points(
    domain: DomainSpec,
    count: int,
    upper_depth: float,
    lower_depth: float,
    rng: np.random.Generator,
    integrator: Optional[FlowIntegrator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Points with depth in ``(lower_depth, upper_depth]`` flowed in from random boundary rays.

    Returns the points and their boundary feet.
    """
    u = rng.standard_normal((count, domain.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    feet = boundary_radius(domain, u)[:, None] * u
    depth = upper_depth - rng.uniform(0.0, 1.0, size=count) * (upper_depth - lower_depth)
    return flow(domain, feet, depth, integrator), feet


def whitney_decompose(
    grid: DyadicGrid,
    domain: DomainSpec,
    level: int,
    samples: int = 10_000,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
) -> WhitneyDecomposition:
    """Upper Whitney pieces of one level and a Monte Carlo partition scan of the layer."""
    if level < grid.n0:
        raise ConfigurationError(f"Whitney level {level} is below N0={grid.n0}", "level")
    top, bottom = grid.sidelength(level), grid.sidelength(level + 1)
    centers_idx = grid.centers[grid.slot(level)]
    lifted = np.atleast_2d(flow(domain, grid.sample.points[centers_idx], top, integrator))
    pieces = [
        WhitneyPiece(grid.grid_index, level, i, (-top, -bottom), lifted[i]) for i in range(len(centers_idx))
    ]

    rng = np.random.default_rng(seed)
    pts, _ = layer_points(domain, samples, top, bottom, rng, integrator)
    landing = np.atleast_2d(flow_project(domain, pts, integrator))
    labs = grid.labels_at(level)
    if len(grid.sample) > 1:
        dist, idx = grid.sample.tree.query(landing, k=2)
        near_tie = dist[:, 1] - dist[:, 0] <= 1e-9 * (1.0 + dist[:, 0])
        ambiguous = near_tie & (labs[idx[:, 0]] != labs[idx[:, 1]])
        owner = labs[idx[:, 0]]
    else:
        ambiguous = np.zeros(samples, dtype=bool)
        owner = np.zeros(samples, dtype=int)
    counts = np.bincount(owner, minlength=len(pieces))
    report = WhitneyDecomposition(level, pieces, samples, int(ambiguous.sum()), counts)
    logger.info(
        f"Whitney level {level}: {len(pieces)} pieces, unambiguous {report.unambiguous_fraction:.5f}"
    )
    return report


@dataclass
class WhitneyLocation:
    level: Optional[int]
    index: Optional[int]
    beyond_finest: bool = False

    @property
    def is_root(self) -> bool:
        return self.level is None


def whitney_level(grid: DyadicGrid, depth: float) -> Optional[int]:
    """Level k with delta^(k+1) < depth <= delta^k, or None above the top layer."""
    if depth > grid.sidelength(grid.n0):
        return None
    k = int(math.floor(math.log(depth) / math.log(grid.delta)))
    while grid.delta ** k < depth:
        k -= 1
    while grid.delta ** (k + 1) >= depth:
        k += 1
    return max(k, grid.n0)


def locate_whitney_piece(grid: DyadicGrid, z, integrator: Optional[FlowIntegrator] = None) -> WhitneyLocation:
    """The Whitney piece containing ``z``; deep points fall in the root piece."""
    domain = grid.sample.domain
    z = as_points(domain, z)
    rv = float(defining_function(domain, z))
    if rv >= 0:
        raise DomainInputError("locate_whitney_piece takes points of the domain")
    level = whitney_level(grid, -rv)
    if level is None:
        return WhitneyLocation(None, None)
    beyond = level > grid.finest
    level = min(level, grid.finest)
    foot = flow_project(domain, z, integrator)
    owner = int(grid.sample.nearest(foot)[0])
    return WhitneyLocation(level, int(grid.labels_at(level)[owner]), beyond)


@dataclass
class BergmanFlowTree:
    """Whitney centers linked by cube ancestry; the key ``None`` is the root piece."""

    grid_index: int
    nodes: Dict[Optional[Tuple[int, int]], Optional[np.ndarray]]
    parent: Dict[Tuple[int, int], Optional[Tuple[int, int]]]


def bergman_flow_tree(grid: DyadicGrid, integrator: Optional[FlowIntegrator] = None) -> BergmanFlowTree:
    domain = grid.sample.domain
    nodes: Dict[Optional[Tuple[int, int]], Optional[np.ndarray]] = {None: np.zeros(domain.dim)}
    parent: Dict[Tuple[int, int], Optional[Tuple[int, int]]] = {}
    for level in grid.levels:
        s = grid.slot(level)
        lifted = np.atleast_2d(flow(domain, grid.sample.points[grid.centers[s]], grid.sidelength(level), integrator))
        for i in range(len(grid.centers[s])):
            nodes[(level, i)] = lifted[i]
            parent[(level, i)] = None if s == 0 else (level - 1, int(grid.parents[s][i]))
    return BergmanFlowTree(grid_index=grid.grid_index, nodes=nodes, parent=parent)


def tree_matches_grid(tree: BergmanFlowTree, grid: DyadicGrid) -> bool:
    """Tree order against cube ancestry, node by node."""
    expected = 0
    for level in grid.levels:
        for i in range(grid.cube_count(level)):
            expected += 1
            p = grid.parent(level, i)
            want = None if p is None else (level - 1, p)
            if tree.parent.get((level, i), "missing") != want:
                return False
    return len(tree.parent) == expected


def tent_decomposition_check(
    grid: DyadicGrid,
    level: int,
    index: int,
    samples: int = 500,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
) -> float:
    """Fraction of sampled tent points whose Whitney piece descends from the tent's cube."""
    domain = grid.sample.domain
    rng = np.random.default_rng(seed)
    members = grid.members(level, index)
    feet = grid.sample.points[rng.choice(members, size=samples)]
    depth = grid.sidelength(level) * rng.uniform(1e-3, 1.0, size=samples)
    pts = np.atleast_2d(flow(domain, feet, depth, integrator))
    consistent = 0
    for z in pts:
        where = locate_whitney_piece(grid, z, integrator)
        if where.is_root:
            continue
        chain = grid.ancestors(where.level, where.index)
        consistent += int((level, index) in chain)
    return consistent / samples


@dataclass
class EquivalenceReport:
    eps: List[float]
    flow_to_proj: List[float]
    proj_to_flow: List[float]
    displacement_rate: float
    samples: int
    failures: int = 0
    unresolved: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def c1(self) -> float:
        return max(self.flow_to_proj + self.proj_to_flow)

    @property
    def failure_rate(self) -> float:
        return self.failures / max(self.samples, 1)

    @property
    def valid(self) -> bool:
        return self.failure_rate <= 0.01


def _boundary_points_in_polydisc(
    domain: DomainSpec,
    frame: ExtremalFrame,
    count: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, int]:
    collected: List[np.ndarray] = []
    failures = 0
    have = 0
    for _ in range(40):
        batch = 4 * count
        radius = frame.radii * np.sqrt(rng.uniform(size=(batch, domain.n)))
        lam = radius * np.exp(2j * np.pi * rng.uniform(size=(batch, domain.n)))
        w, ok = nearest_project_many(domain, frame.reconstruct(lam))
        failures += int(np.count_nonzero(~ok))
        w = w[ok]
        keep = np.atleast_1d(polydisc_contains(frame, w))
        collected.append(w[keep])
        have += int(keep.sum())
        if have >= count:
            break
    pts = np.concatenate(collected)[:count]
    if len(pts) < count:
        raise ProjectionError(f"Collected only {len(pts)} of {count} boundary points in the polydisc")
    return pts, failures


def _inward_point(domain: DomainSpec, feet: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Points on the inward normals through ``feet`` at the given depths."""
    nu = unit_normal(domain, feet)
    lo = np.zeros(len(feet))
    hi = 4.0 * depth / np.linalg.norm(gradient(domain, feet), axis=1)
    for _ in range(200):
        short = defining_function(domain, feet - hi[:, None] * nu) > -depth
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = defining_function(domain, feet - mid[:, None] * nu) > -depth
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return feet - (0.5 * (lo + hi))[:, None] * nu


def _least_multiplier(
    domain: DomainSpec,
    zeta: np.ndarray,
    eps: float,
    base_frame: ExtremalFrame,
    landing: np.ndarray,
    multipliers: np.ndarray,
    seed: int,
    config: Optional[TauConfig],
) -> Optional[float]:
    pending = np.ones(len(landing), dtype=bool)
    for c in multipliers:
        if c * eps > domain.nbhd_width / 2:
            return None
        frame = base_frame if c == 1.0 else extremal_frame(domain, zeta, c * eps, seed, config)
        pending &= ~np.atleast_1d(polydisc_contains(frame, landing))
        if not np.any(pending):
            return float(c)
    return None


def tent_equivalence_scan(
    domain: DomainSpec,
    zeta,
    eps_ladder: Sequence[float],
    samples: int = 200,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
    multipliers: Optional[Sequence[float]] = None,
    config: Optional[TauConfig] = None,
) -> EquivalenceReport:
    """Least multipliers with ``T^flow_eps(zeta) in T_{c eps}(zeta)`` and the reverse inclusion."""
    zeta = as_points(domain, zeta)
    if abs(float(defining_function(domain, zeta))) >= 1e-9:
        raise DomainInputError("tent_equivalence_scan takes a boundary point")
    multipliers = np.asarray(multipliers if multipliers is not None else 2.0 ** (np.arange(49) / 8.0))
    rng = np.random.default_rng(seed)
    report = EquivalenceReport(eps=[], flow_to_proj=[], proj_to_flow=[], displacement_rate=0.0, samples=0)

    for eps in eps_ladder:
        frame = extremal_frame(domain, zeta, eps, seed, config)
        feet, failures = _boundary_points_in_polydisc(domain, frame, samples, rng)
        report.failures += failures
        depth = eps * rng.uniform(1e-3, 1.0, size=samples)

        flowed = np.atleast_2d(flow(domain, feet, depth, integrator))
        proj_landing, ok = nearest_project_many(domain, flowed)
        report.failures += int(np.count_nonzero(~ok))
        shift = np.linalg.norm(proj_landing[ok] - feet[ok], axis=1) / depth[ok]
        if shift.size:
            report.displacement_rate = max(report.displacement_rate, float(shift.max()))
        c_fp = _least_multiplier(domain, zeta, eps, frame, proj_landing[ok], multipliers, seed, config)

        lowered = _inward_point(domain, feet, depth)
        flow_landing = np.atleast_2d(flow_project(domain, lowered, integrator))
        c_pf = _least_multiplier(domain, zeta, eps, frame, flow_landing, multipliers, seed, config)

        report.samples += 2 * samples
        report.eps.append(float(eps))
        for name, c, bucket in (("flow_to_proj", c_fp, report.flow_to_proj), ("proj_to_flow", c_pf, report.proj_to_flow)):
            if c is None:
                report.unresolved.append((name, float(eps)))
                samples_discarded.labels(reason="multiplier_beyond_band").inc()
                bucket.append(math.inf)
            else:
                bucket.append(c)
        logger.debug(f"Equivalence at eps={eps:.4g}: flow->proj {c_fp}, proj->flow {c_pf}")
    if report.displacement_rate > 4.0:
        logger.warning(f"Tangential displacement rate {report.displacement_rate:.4g} exceeds 4")
    return report


@dataclass
class ScaleThresholds:
    """Calibrated small-scale thresholds: tau1 for tent volumes, tau2 for tent equivalence.

    ``None`` means the constant never settled on the ladder, and the first level then
    falls back to the flow band alone.
    """

    ladder: List[float]
    tau1: Optional[float] = None
    tau2: Optional[float] = None
    volume_constants: List[float] = field(default_factory=list)
    equivalence_constants: List[float] = field(default_factory=list)

    @property
    def limits(self) -> Tuple[float, ...]:
        return tuple(t for t in (self.tau1, self.tau2) if t is not None)

    def to_document(self) -> Dict[str, object]:
        return {
            "ladder": list(self.ladder),
            "tau1": self.tau1,
            "tau2": self.tau2,
            "volume_constants": list(self.volume_constants),
            "equivalence_constants": list(self.equivalence_constants),
        }


def threshold_ladder(domain: DomainSpec, rungs: int = 6) -> List[float]:
    """Halving scales from the flow band down."""
    if rungs < 2:
        raise ConfigurationError(f"A threshold ladder needs at least 2 rungs, got {rungs}", "rungs")
    return [domain.flow_band * 2.0 ** -j for j in range(rungs)]


def stable_scale(
    scales: Sequence[float], constants: Sequence[float], spread: float, ceiling: float = math.inf
) -> Optional[float]:
    """Largest scale from which every finer constant is finite, at most ``ceiling``, and within ``spread``.

    The run is grown upward from the finest scale and needs two rungs to count.
    """
    if len(scales) != len(constants):
        raise ConfigurationError("Scales and constants differ in length", "ladder")
    order = np.argsort(scales)
    best = None
    lo, hi = math.inf, 0.0
    for rank, i in enumerate(order):
        c = float(constants[i])
        if not (math.isfinite(c) and 0 < c <= ceiling):
            break
        lo, hi = min(lo, c), max(hi, c)
        if hi / lo > spread:
            break
        if rank >= 1:
            best = float(scales[i])
    return best


def calibrate_equivalence_threshold(
    domain: DomainSpec,
    zeta,
    ladder: Sequence[float],
    samples: int = 50,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
    config: Optional[TauConfig] = None,
    spread: float = 1.3,
) -> Tuple[Optional[float], List[float]]:
    """tau2 with the per-scale equivalence constants max(flow->proj, proj->flow).

    A scale whose scan fails counts as an infinite constant.
    """
    constants = []
    for eps in ladder:
        try:
            report = tent_equivalence_scan(domain, zeta, [eps], samples, seed, integrator, config=config)
        except DyadicError as exc:
            logger.warning(f"Equivalence scan at eps={eps:.4g} failed: {exc}")
            constants.append(math.inf)
            continue
        constants.append(report.c1 if report.valid else math.inf)
    tau2 = stable_scale(ladder, constants, spread)
    logger.info(f"Equivalence constants {[round(c, 4) for c in constants]} give tau2={tau2}")
    return tau2, constants
