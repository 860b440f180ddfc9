"""Level-set curvature, the area-element evolution law, and tent/Whitney volumes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson
from scipy.linalg import null_space

from dyadic_flow_tents.boundary_sht import BoundarySample, DyadicGrid
from dyadic_flow_tents.domain_model import (
    AMBIENT_BOX,
    DomainSpec,
    as_points,
    defining_function,
    gradient,
    hessian,
    sample_band,
    samples_discarded,
    unit_normal,
)
from dyadic_flow_tents.exceptions import DomainInputError, EmptyRegionError, SingularityError
from dyadic_flow_tents.extremal_basis import ExtremalFrame, TauConfig
from dyadic_flow_tents.flow_tents import (
    FlowIntegrator,
    ScaleThresholds,
    Tent,
    calibrate_equivalence_threshold,
    flow,
    flow_trajectory,
    stable_scale,
    tent_contains_many,
    threshold_ladder,
)

logger = logging.getLogger(__name__)

VOLUME_METHODS = ("monte_carlo", "coarea_quadrature")
COAREA_NODES = 33
MIN_ACCEPTANCE = 1e-4
# collar volume constants count as settled within 10%
VOLUME_SPREAD = 1.1


def mean_curvature(domain: DomainSpec, z) -> float:
    """((grad r) Hess (grad r)^T - |grad r|^2 tr Hess) / (2 |grad r|^3); the ball gives (1 - 2n)/2."""
    z = as_points(domain, z)
    g = gradient(domain, z)
    norm = float(np.linalg.norm(g))
    if norm <= 0.5:
        raise SingularityError(f"|grad r| = {norm:.3g} is too small for the curvature formula")
    H = hessian(domain, z)
    return float((g @ H @ g - norm ** 2 * np.trace(H)) / (2.0 * norm ** 3))


def geometric_mean_curvature(domain: DomainSpec, z) -> np.ndarray:
    """Sum of principal curvatures of the level sets, outward normal; -2x :func:`mean_curvature`."""
    z = as_points(domain, z)
    g = gradient(domain, z)
    H = hessian(domain, z)
    norm2 = np.sum(g * g, axis=-1)
    quad = np.einsum("...i,...ij,...j->...", g, H, g)
    return (norm2 * np.trace(H, axis1=-2, axis2=-1) - quad) / norm2 ** 1.5


def curvature_bound(domain: DomainSpec, samples: int = 2000, seed: int = 0) -> float:
    """max |H| / min |grad r| over band points, the constant that controls area growth."""
    z = sample_band(domain, samples, np.random.default_rng(seed))
    H = np.abs(geometric_mean_curvature(domain, z))
    return float(H.max() / np.linalg.norm(gradient(domain, z), axis=1).min())


@dataclass
class LevelSetFrame:
    """Tangent-plane chart data of the level set through ``point``; ``mean_curvature`` is geometric."""

    point: np.ndarray
    chart_point: np.ndarray
    time: float
    tangent: np.ndarray
    metric: np.ndarray
    area_element: float
    second_fundamental: np.ndarray
    mean_curvature: float
    normal: np.ndarray


def level_set_frame(domain: DomainSpec, z, time: float = 0.0) -> LevelSetFrame:
    z = as_points(domain, z)
    g = gradient(domain, z)
    norm = float(np.linalg.norm(g))
    if norm <= 0.5:
        raise SingularityError(f"|grad r| = {norm:.3g} is too small for a level-set frame")
    nu = g / norm
    E = null_space(nu[None, :])
    metric = E.T @ E
    A = E.T @ hessian(domain, z) @ E / norm
    A = 0.5 * (A + A.T)
    return LevelSetFrame(
        point=z.copy(),
        chart_point=np.zeros(domain.dim - 1),
        time=time,
        tangent=E,
        metric=metric,
        area_element=float(math.sqrt(np.linalg.det(metric))),
        second_fundamental=A,
        mean_curvature=float(np.trace(np.linalg.solve(metric, A))),
        normal=nu,
    )


def graph_chart(domain: DomainSpec, center: np.ndarray, tangent: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Boundary points over tangent-plane coordinates ``p``, solved along the normal at ``center``."""
    nu0 = unit_normal(domain, center)
    base = center + np.atleast_2d(p) @ tangent.T
    s = np.zeros(len(base))
    for _ in range(50):
        w = base + s[:, None] * nu0
        rv = defining_function(domain, w)
        if np.max(np.abs(rv)) <= 1e-14:
            break
        s -= rv / (gradient(domain, w) @ nu0)
    return base + s[:, None] * nu0


@dataclass
class AreaEvolutionReport:
    residual: float
    empirical_c: float
    curvature_bound: float
    patch_points: int
    times: List[float]
    rejected: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.residual < 1e-4 and self.empirical_c <= 1.1 * self.curvature_bound + 1e-6


def area_evolution_check(
    domain: DomainSpec,
    center,
    times: Sequence[float],
    radius: float = 0.05,
    space_step: float = 1e-4,
    time_step: float = 1e-3,
    integrator: Optional[FlowIntegrator] = None,
    bound_samples: int = 2000,
) -> AreaEvolutionReport:
    """Residual of d/dt sqrt(g_t) = -H sqrt(g_t)/|grad r| and the empirical growth constant.

    The chart is a graph over the tangent plane at ``center``; patch points are the chart
    origin and the points at ``radius/2`` along each tangent axis.
    """
    center = as_points(domain, center)
    if abs(float(defining_function(domain, center))) > 1e-9:
        raise DomainInputError("area_evolution_check takes a boundary point as chart center")
    times = np.asarray(sorted(times), dtype=float)
    if times[0] <= time_step or times[-1] + time_step > domain.flow_band:
        raise DomainInputError(f"Times must lie in ({time_step}, {domain.flow_band - time_step}]")
    d = domain.dim - 1
    tangent = level_set_frame(domain, center).tangent
    patch = np.vstack([np.zeros(d), 0.5 * radius * np.eye(d), -0.5 * radius * np.eye(d)])

    offsets = np.vstack([space_step * np.eye(d), -space_step * np.eye(d)])
    stencil = (patch[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    start = graph_chart(domain, center, tangent, stencil)

    schedule = np.unique(np.concatenate([[0.0], times - time_step, times, times + time_step]))
    states = flow_trajectory(domain, start, schedule, integrator)
    states = states.reshape(len(schedule), len(patch), 2 * d, domain.dim)

    def area(step: int) -> Tuple[np.ndarray, np.ndarray]:
        s = states[step]
        J = (s[:, :d, :] - s[:, d:, :]) / (2.0 * space_step)
        gram = np.einsum("pik,pjk->pij", J, J)
        return np.sqrt(np.linalg.det(gram)), np.linalg.cond(gram)

    root0, cond0 = area(0)
    keep = cond0 <= 1e6
    report = AreaEvolutionReport(0.0, 0.0, curvature_bound(domain, bound_samples), len(patch), times.tolist())
    for i in np.flatnonzero(~keep):
        report.rejected.append(("chart_degenerate", f"patch point {i}: cond {cond0[i]:.3g}"))
        samples_discarded.labels(reason="chart_degenerate").inc()

    for t in times:
        k = int(np.searchsorted(schedule, t))
        now, _ = area(k)
        ahead, _ = area(int(np.searchsorted(schedule, t + time_step)))
        behind, _ = area(int(np.searchsorted(schedule, t - time_step)))
        rate = (ahead - behind) / (2.0 * time_step)
        positions = states[k].mean(axis=1)
        H = geometric_mean_curvature(domain, positions)
        speed = np.linalg.norm(gradient(domain, positions), axis=1)
        residual = np.abs(rate + H * now / speed) / now
        growth = np.abs(np.log(now / root0)) / t
        report.residual = max(report.residual, float(residual[keep].max(initial=0.0)))
        report.empirical_c = max(report.empirical_c, float(growth[keep].max(initial=0.0)))
    logger.info(
        f"Area evolution on {domain.kind}: residual {report.residual:.3g}, "
        f"C {report.empirical_c:.4g} against bound {report.curvature_bound:.4g}"
    )
    return report


@dataclass
class VolumeEstimate:
    value: float
    stderr: float
    samples: int
    method: str


def ball_tent_volume(sigma: float, height: float, n: int) -> float:
    """Exact flow-tent volume of the ball over boundary mass ``sigma``."""
    return sigma * (1.0 - (1.0 - 2.0 * height) ** n) / (2.0 * n)


def _tent_box(grid: DyadicGrid, tent: Tent, integrator: Optional[FlowIntegrator]) -> Tuple[np.ndarray, np.ndarray]:
    domain = grid.sample.domain
    if tent.is_root:
        if not domain.bounded:
            raise DomainInputError("The root tent of an unbounded domain has infinite volume")
        return np.full(domain.dim, -AMBIENT_BOX / 2), np.full(domain.dim, AMBIENT_BOX / 2)
    members = grid.members(tent.level, tent.index)
    feet = grid.sample.points[members]
    lifted = np.atleast_2d(flow(domain, feet, tent.resolved_height(grid), integrator))
    cloud = np.vstack([feet, lifted])
    pad = 2.0 * float(grid.sample.spacing(members).max(initial=0.0))
    return cloud.min(axis=0) - pad, cloud.max(axis=0) + pad


def _tent_hits(
    grid: DyadicGrid,
    tent: Tent,
    samples: int,
    rng: np.random.Generator,
    integrator: Optional[FlowIntegrator],
    target_hits: int = 400,
    max_rounds: int = 16,
) -> Tuple[float, int, np.ndarray]:
    """Box volume, points drawn, and the depths of the draws that fell in the tent."""
    domain = grid.sample.domain
    lo, hi = _tent_box(grid, tent, integrator)
    box = float(np.prod(hi - lo))
    drawn = 0
    depths: List[np.ndarray] = []
    hits = 0
    for _ in range(max_rounds):
        pts = rng.uniform(lo, hi, size=(samples, domain.dim))
        inside = tent_contains_many(grid, tent, pts, integrator)
        depths.append(defining_function(domain, pts[inside]))
        drawn += samples
        hits += int(inside.sum())
        if hits >= target_hits:
            break
    if hits == 0 or hits / drawn < MIN_ACCEPTANCE:
        raise EmptyRegionError(f"Tent {tent.key} accepted {hits} of {drawn} box samples")
    return box, drawn, np.concatenate(depths)


def _tent_rng(seed: int, tent: Tent) -> np.random.Generator:
    level = -1 if tent.level is None else tent.level
    index = -1 if tent.index is None else tent.index
    return np.random.default_rng([seed, tent.grid_index, level + 1, index + 1])


def collar_volumes(
    domain: DomainSpec, feet: np.ndarray, height: float, integrator: Optional[FlowIntegrator] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Volume per unit boundary mass of the flow collar of ``height`` above each foot.

    Returns the Simpson values on ``COAREA_NODES`` nodes and on every other node.
    """
    s = np.linspace(0.0, height, COAREA_NODES)
    states = flow_trajectory(domain, feet, s, integrator)
    speed = np.linalg.norm(gradient(domain, states), axis=-1)
    H = geometric_mean_curvature(domain, states)
    log_j = -cumulative_trapezoid(H / speed, s, axis=0, initial=0.0)
    density = np.exp(log_j) / speed
    return simpson(density, x=s, axis=0), simpson(density[::2], x=s[::2], axis=0)


def _coarea_volume(grid: DyadicGrid, tent: Tent, integrator: Optional[FlowIntegrator]) -> VolumeEstimate:
    domain = grid.sample.domain
    members = grid.members(tent.level, tent.index)
    per_member, coarse = collar_volumes(domain, grid.sample.points[members], tent.resolved_height(grid), integrator)
    contrib = grid.sample.weights[members] * per_member
    quadrature = abs(float(np.dot(grid.sample.weights[members], per_member - coarse)))
    stderr = math.sqrt(float(np.sum(contrib ** 2)) + quadrature ** 2)
    return VolumeEstimate(float(contrib.sum()), stderr, len(members) * COAREA_NODES, "coarea_quadrature")


def tent_volume(
    grid: DyadicGrid,
    tent: Tent,
    samples: int = 20_000,
    seed: int = 0,
    method: str = "monte_carlo",
    integrator: Optional[FlowIntegrator] = None,
) -> VolumeEstimate:
    """Volume of a tent by box rejection sampling or by the coarea integral along the flow.

    The coarea stderr combines the node-halving difference with the sampling error of the
    boundary measure.
    """
    if method not in VOLUME_METHODS:
        raise DomainInputError(f"Unknown volume method {method!r}")
    if not tent.is_root and tent.resolved_height(grid) == 0.0:
        return VolumeEstimate(0.0, 0.0, 0, method)
    if method == "coarea_quadrature":
        if tent.is_root or tent.flavor != "flow":
            raise DomainInputError("Coarea quadrature covers dyadic flow tents only")
        return _coarea_volume(grid, tent, integrator)
    box, drawn, depths = _tent_hits(grid, tent, samples, _tent_rng(seed, tent), integrator)
    p = len(depths) / drawn
    estimate = VolumeEstimate(box * p, box * math.sqrt(p * (1.0 - p) / drawn), drawn, method)
    tent.volume = estimate
    logger.debug(f"Tent {tent.key}: volume {estimate.value:.4g} +- {estimate.stderr:.2g}")
    return estimate


@dataclass
class WhitneyVolumeRow:
    index: int
    tent: float
    whitney: float
    ratio: float
    stderr: float


@dataclass
class WhitneyVolumeReport:
    level: int
    bound: float
    rows: List[WhitneyVolumeRow] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(
            1.0 - 3.0 * row.stderr <= row.ratio <= self.bound * (1.0 + 3.0 * row.stderr) + 3.0 * row.stderr
            for row in self.rows
        )


def whitney_volume_comparability(
    grid: DyadicGrid,
    level: int,
    samples: int = 20_000,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
) -> WhitneyVolumeReport:
    """Vol(T^flow(Q)) / Vol(W^up_Q) per level cube, measured on one set of draws."""
    if level < grid.n0:
        raise DomainInputError(f"Level {level} is below N0={grid.n0}")
    report = WhitneyVolumeReport(level=level, bound=4.0 / (1.0 - grid.delta))
    floor = -grid.sidelength(level + 1)
    for index in range(grid.cube_count(level)):
        tent = Tent(grid.grid_index, level, index, "flow")
        try:
            box, drawn, depths = _tent_hits(grid, tent, samples, _tent_rng(seed, tent), integrator)
        except EmptyRegionError as exc:
            report.skipped.append(("empty_region", str(exc)))
            samples_discarded.labels(reason="empty_region").inc()
            continue
        in_piece = int(np.count_nonzero(depths < floor))
        if in_piece == 0:
            report.skipped.append(("empty_piece", f"cube {index}"))
            continue
        q = in_piece / len(depths)
        ratio = 1.0 / q
        stderr = ratio ** 2 * math.sqrt(q * (1.0 - q) / len(depths))
        report.rows.append(
            WhitneyVolumeRow(index, box * len(depths) / drawn, box * in_piece / drawn, ratio, stderr)
        )
    logger.info(
        f"Whitney volumes at level {level}: {len(report.rows)} cubes, max ratio "
        f"{max((r.ratio for r in report.rows), default=float('nan')):.4g} (bound {report.bound:.4g})"
    )
    return report


def mcneal_stein_volume(domain: DomainSpec, frame: ExtremalFrame, samples: int = 20_000, seed: int = 0) -> VolumeEstimate:
    """Vol(P_eps(xi) and the domain) by uniform sampling of the polydisc."""
    rng = np.random.default_rng(seed)
    n = domain.n
    radius = frame.radii * np.sqrt(rng.uniform(size=(samples, n)))
    lam = radius * np.exp(2j * np.pi * rng.uniform(size=(samples, n)))
    pts = frame.reconstruct(lam)
    p = float(np.count_nonzero(defining_function(domain, pts) < 0)) / samples
    polydisc = float(np.prod(math.pi * frame.radii ** 2))
    return VolumeEstimate(polydisc * p, polydisc * math.sqrt(p * (1.0 - p) / samples), samples, "monte_carlo")


def volume_constants(
    domain: DomainSpec, feet: np.ndarray, ladder: Sequence[float], integrator: Optional[FlowIntegrator] = None
) -> List[float]:
    """Per height t, the worst of q and 1/q for q = Vol(collar)/(sigma t) over single feet.

    A cube's ratio is a mass average of its feet's ratios, so the constant bounds every cube.
    """
    constants = []
    for t in ladder:
        per_foot, _ = collar_volumes(domain, feet, t, integrator)
        q = per_foot / t
        constants.append(float(max(q.max(), 1.0 / q.min())))
    return constants


def calibrate_scale_thresholds(
    sample: BoundarySample,
    rungs: int = 6,
    feet: int = 200,
    equivalence_samples: int = 50,
    seed: int = 0,
    integrator: Optional[FlowIntegrator] = None,
    config: Optional[TauConfig] = None,
) -> ScaleThresholds:
    """tau1 from the collar volume constants (at most 2) and tau2 from tent equivalence."""
    domain = sample.domain
    ladder = threshold_ladder(domain, rungs)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(sample), size=min(feet, len(sample)), replace=False)
    constants = volume_constants(domain, sample.points[idx], ladder, integrator)
    tau1 = stable_scale(ladder, constants, VOLUME_SPREAD, ceiling=2.0)
    tau2, equivalence = calibrate_equivalence_threshold(
        domain, sample.points[idx[0]], ladder, equivalence_samples, seed, integrator, config
    )
    thresholds = ScaleThresholds(
        ladder=ladder, tau1=tau1, tau2=tau2, volume_constants=constants, equivalence_constants=equivalence
    )
    logger.info(f"Scale thresholds for {domain.kind}: tau1={tau1}, tau2={tau2}")
    return thresholds
