"""Tent averages, maximal and sparse operators over the flow-tent basis, A_p constants and slopes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from dyadic_flow_tents.bergman import KernelModel, QuadratureScheme, kernel
from dyadic_flow_tents.boundary_sht import GridFamily
from dyadic_flow_tents.domain_model import DomainSpec, as_points, defining_function, samples_discarded
from dyadic_flow_tents.exceptions import ConfigurationError, DomainInputError, EmptyRegionError
from dyadic_flow_tents.flow_tents import FlowIntegrator, Tent, flow, flow_project

logger = logging.getLogger(__name__)

WEIGHT_KINDS = ("constant", "power")

NodeFunction = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


class TentBasis:
    """The flow tents of every family grid, resolved on the quadrature nodes.

    Each node near the boundary is flowed back once; its tent at level ``k`` of grid ``g``
    is the level-``k`` cube of its foot, provided its depth is below ``delta^k``.
    """

    def __init__(self, family: GridFamily, quad: QuadratureScheme, integrator: Optional[FlowIntegrator] = None):
        self.family = family
        self.quad = quad
        self.integrator = integrator
        self.top = family.grids[0].sidelength(family.n0)
        self.depth, self.foot = self.locate(quad.nodes)
        self._labels: Dict[Tuple[int, int], np.ndarray] = {}
        logger.info(
            f"Tent basis over {len(family.grids)} grids: {int(np.count_nonzero(self.foot >= 0))} "
            f"of {len(quad)} nodes lie in the dyadic band"
        )

    @property
    def domain(self) -> DomainSpec:
        return self.family.domain

    def locate(self, z) -> Tuple[np.ndarray, np.ndarray]:
        """Depth and flow-foot sample index (-1 above the band) of each point."""
        pts = np.atleast_2d(as_points(self.domain, z))
        depth = -defining_function(self.domain, pts)
        if np.any(depth <= 0):
            raise DomainInputError("Tent basis points must lie inside the domain")
        foot = np.full(len(pts), -1, dtype=int)
        near = depth < self.top
        if np.any(near):
            landing = np.atleast_2d(flow_project(self.domain, pts[near], self.integrator))
            foot[near] = self.family.sample.nearest(landing)
        return depth, foot

    def grid_levels(self) -> Iterator[Tuple[int, int]]:
        for g, grid in enumerate(self.family.grids):
            for level in grid.levels:
                yield g, level

    def labels_for(self, g: int, level: int, depth: np.ndarray, foot: np.ndarray) -> np.ndarray:
        grid = self.family.grids[g]
        inside = (depth < grid.sidelength(level)) & (foot >= 0)
        return np.where(inside, grid.labels_at(level)[np.maximum(foot, 0)], -1)

    def node_labels(self, g: int, level: int) -> np.ndarray:
        key = (g, level)
        if key not in self._labels:
            self._labels[key] = self.labels_for(g, level, self.depth, self.foot)
        return self._labels[key]

    def tents(self) -> Iterator[Tent]:
        yield Tent(0, None, None)
        for g, level in self.grid_levels():
            for index in range(self.family.grids[g].cube_count(level)):
                yield Tent(g, level, index)

    def mask(self, tent: Tent) -> np.ndarray:
        if tent.is_root:
            return np.ones(len(self.quad), dtype=bool)
        return self.node_labels(tent.grid_index, tent.level) == tent.index

    def values(self, f: NodeFunction) -> np.ndarray:
        values = np.asarray(f(self.quad.nodes) if callable(f) else f)
        if values.shape != (len(self.quad),):
            raise DomainInputError(f"Expected {len(self.quad)} node values, got shape {values.shape}")
        return values

    def table(self, f: NodeFunction, weight: Optional["WeightModel"] = None) -> "AverageTable":
        """Averages of |f| (w-weighted when ``weight`` is given) over every tent at once."""
        w = weight.on_nodes(self) if weight is not None else np.ones(len(self.quad))
        den = w * self.quad.weights
        num = np.abs(self.values(f)) * den
        levels: Dict[Tuple[int, int], np.ndarray] = {}
        for g, level in self.grid_levels():
            labs = self.node_labels(g, level)
            sel = labs >= 0
            count = self.family.grids[g].cube_count(level)
            top = np.bincount(labs[sel], weights=num[sel], minlength=count)
            bottom = np.bincount(labs[sel], weights=den[sel], minlength=count)
            levels[(g, level)] = np.divide(top, bottom, out=np.full(count, np.nan), where=bottom > 0)
        return AverageTable(root=float(num.sum() / den.sum()), levels=levels)


@dataclass
class AverageTable:
    root: float
    levels: Dict[Tuple[int, int], np.ndarray]

    def value(self, tent: Tent) -> float:
        if tent.is_root:
            return self.root
        return float(self.levels[(tent.grid_index, tent.level)][tent.index])

    @property
    def empty_tents(self) -> int:
        return int(sum(np.count_nonzero(np.isnan(v)) for v in self.levels.values()))


def average(f: NodeFunction, tent: Tent, basis: TentBasis, weight: Optional["WeightModel"] = None) -> float:
    """<|f|>_T, or the w-weighted average when ``weight`` is given."""
    mask = basis.mask(tent)
    w = weight.on_nodes(basis)[mask] if weight is not None else 1.0
    den = w * basis.quad.weights[mask]
    total = float(np.sum(den))
    if not np.any(mask) or total <= 0:
        raise EmptyRegionError(f"No quadrature mass in tent {tent.key}")
    return float(np.sum(np.abs(basis.values(f)[mask]) * den) / total)


def containing_tents(basis: TentBasis, z, depth=None, foot=None) -> List[Tent]:
    """Root plus, per grid, the chain of tents containing ``z``."""
    if depth is None:
        depth, foot = basis.locate(z)
    tents = [Tent(0, None, None)]
    for g, level in basis.grid_levels():
        label = int(basis.labels_for(g, level, np.atleast_1d(depth), np.atleast_1d(foot))[0])
        if label >= 0:
            tents.append(Tent(g, level, label))
    return tents


def _fold(table: AverageTable, basis: TentBasis, depth: np.ndarray, foot: np.ndarray, mode: str) -> np.ndarray:
    k0 = len(basis.family.grids)
    out = np.full(len(depth), table.root if mode == "max" else k0 * table.root)
    for g, level in basis.grid_levels():
        labs = basis.labels_for(g, level, depth, foot)
        vals = np.where(labs >= 0, table.levels[(g, level)][np.maximum(labs, 0)], np.nan)
        vals = np.nan_to_num(vals, nan=0.0)
        out = np.maximum(out, vals) if mode == "max" else out + vals
    return out


def maximal_many(f: NodeFunction, z, basis: TentBasis, weight: Optional["WeightModel"] = None, table=None) -> np.ndarray:
    table = table or basis.table(f, weight)
    depth, foot = basis.locate(z)
    return _fold(table, basis, depth, foot, "max")


def maximal(f: NodeFunction, z, basis: TentBasis, weight: Optional["WeightModel"] = None) -> float:
    """M_G f(z): the largest tent average over tents containing z; M^w_G with a weight."""
    return float(maximal_many(f, np.atleast_2d(z), basis, weight)[0])


@dataclass
class SparseEvaluation:
    value: float
    contributors: List[Tent] = field(default_factory=list)


def sparse_many(f: NodeFunction, z, basis: TentBasis, table: Optional[AverageTable] = None) -> np.ndarray:
    table = table or basis.table(f)
    depth, foot = basis.locate(z)
    return _fold(table, basis, depth, foot, "sum")


def sparse_apply(f: NodeFunction, z, basis: TentBasis, table: Optional[AverageTable] = None) -> SparseEvaluation:
    """Sum over grids of <f>_T 1_T(z); every grid contributes its root term."""
    table = table or basis.table(f)
    chain = containing_tents(basis, z)
    contributors = [Tent(g, None, None) for g in range(len(basis.family.grids))] + chain[1:]
    value = sum(v for v in (table.value(t) for t in contributors) if not math.isnan(v))
    return SparseEvaluation(value=float(value), contributors=contributors)


@dataclass
class WeightModel:
    """w = 1 or w = |r|^alpha."""

    kind: str = "constant"
    alpha: float = 0.0
    # id(basis) -> (basis, weights); holding the basis keeps its id from being reused
    _cache: Dict[int, Tuple[TentBasis, np.ndarray]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ConfigurationError(f"Unknown weight kind {self.kind!r}", "weight")

    def __call__(self, domain: DomainSpec, z) -> np.ndarray:
        depth = np.abs(defining_function(domain, z))
        if self.kind == "constant":
            return np.ones_like(depth)
        return depth ** self.alpha

    def on_nodes(self, basis: TentBasis) -> np.ndarray:
        entry = self._cache.get(id(basis))
        if entry is None or entry[0] is not basis:
            values = np.ones(len(basis.quad)) if self.kind == "constant" else basis.depth ** self.alpha
            entry = self._cache[id(basis)] = (basis, values)
        return entry[1]

    def dual(self, p: float) -> "WeightModel":
        """sigma = w^(1 - p')."""
        if self.kind == "constant":
            return WeightModel("constant")
        return WeightModel("power", self.alpha * (1.0 - _conjugate(p)))

    def divergent(self, p: float) -> bool:
        """Whether <w> or <sigma> diverges on tents touching the boundary."""
        if self.kind == "constant":
            return False
        return self.alpha <= -1.0 or self.alpha / (p - 1.0) >= 1.0


def _conjugate(p: float) -> float:
    if not p > 1:
        raise ConfigurationError(f"Exponent p must exceed 1, got {p}", "p")
    return p / (p - 1.0)


@dataclass
class ApReport:
    p: float
    constant: float
    argmax: Optional[Tuple]
    table: List[Tuple[Tuple, float]]
    dual_constant: float
    divergent: bool = False
    empty_tents: int = 0

    @property
    def duality_gap(self) -> float:
        """|[sigma]_{A_p'}^(1/(p'-1)) - [w]_{A_p}| relative to [w]_{A_p}."""
        if self.divergent:
            return 0.0
        q = _conjugate(self.p)
        return abs(self.dual_constant ** (1.0 / (q - 1.0)) - self.constant) / self.constant


def ap_constant(w: WeightModel, p: float, basis: TentBasis) -> ApReport:
    """[w]_{A_p} = sup over all basis tents of <w><w^(1-p')>^(p-1), plus the dual constant."""
    q = _conjugate(p)
    if w.divergent(p):
        logger.warning(f"Power weight alpha={w.alpha} has divergent averages at p={p}")
        return ApReport(p, math.inf, None, [], math.inf, divergent=True)
    sigma = w.dual(p)
    mean_w = basis.table(w.on_nodes(basis))
    mean_s = basis.table(sigma.on_nodes(basis))
    rows: List[Tuple[Tuple, float]] = []
    dual = 0.0
    for tent in basis.tents():
        a, b = mean_w.value(tent), mean_s.value(tent)
        if math.isnan(a) or math.isnan(b):
            continue
        rows.append((tent.key, a * b ** (p - 1.0)))
        dual = max(dual, b * a ** (q - 1.0))
    best = max(rows, key=lambda row: row[1])
    report = ApReport(p, best[1], best[0], rows, dual, empty_tents=mean_w.empty_tents)
    logger.info(f"[w]_A{p:g} = {report.constant:.6g} for {w.kind} alpha={w.alpha:g} over {len(rows)} tents")
    return report


def project_columns(model: KernelModel, quad: QuadratureScheme, F: np.ndarray, z) -> np.ndarray:
    """P applied to each column of node values ``F`` at the points ``z``; shape (len(z), columns)."""
    pts = np.atleast_2d(as_points(model.domain, z))
    weighted = F * quad.weights[:, None]
    out = np.empty((len(pts), F.shape[1]), dtype=complex)
    for i, point in enumerate(pts):
        out[i] = kernel(model, point[None, :], quad.nodes) @ weighted
    return out


def band_points(basis: TentBasis, depths: Sequence[float], per_depth: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Points flowed in from random sample points to each depth, with their depth rung."""
    sample = basis.family.sample
    pts, rung = [], []
    for j, d in enumerate(depths):
        idx = rng.integers(len(sample), size=per_depth)
        pts.append(np.atleast_2d(flow(basis.domain, sample.points[idx], d, basis.integrator)))
        rung.append(np.full(per_depth, j))
    return np.vstack(pts), np.concatenate(rung)


def dictionary(basis: TentBasis, rng: np.random.Generator, count: int = 50) -> Dict[str, np.ndarray]:
    """Nonnegative test functions: constant, tent indicators, radial bumps and random node masses."""
    nodes = basis.quad.nodes
    functions: Dict[str, np.ndarray] = {"one": np.ones(len(nodes))}
    tents = [t for t in basis.tents() if not t.is_root]
    for t in rng.permutation(len(tents))[: count // 3]:
        tent = tents[int(t)]
        mask = basis.mask(tent)
        if np.any(mask):
            functions[f"tent:{tent.grid_index}:{tent.level}:{tent.index}"] = mask.astype(float)
    for j in range(count // 3):
        center = nodes[rng.integers(len(nodes))]
        width = rng.uniform(0.1, 0.5)
        functions[f"bump:{j}"] = np.maximum(0.0, 1.0 - np.sum((nodes - center) ** 2, axis=1) / width ** 2)
    for j in range(count - len(functions) + 1):
        functions[f"mass:{j}"] = rng.exponential(size=len(nodes))
    return functions


@dataclass
class DominationRow:
    function: str
    point: int
    rung: int
    depth: float
    projection: float
    sparse: float

    @property
    def ratio(self) -> float:
        return self.projection / self.sparse if self.sparse > 0 else math.inf


@dataclass
class SparseDominationReport:
    rows: List[DominationRow] = field(default_factory=list)
    violations: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def constant(self) -> float:
        return max((row.ratio for row in self.rows), default=0.0)

    def rung_maxima(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for row in self.rows:
            out[row.rung] = max(out.get(row.rung, 0.0), row.ratio)
        return out

    @property
    def depth_spread(self) -> float:
        maxima = [v for v in self.rung_maxima().values() if v > 0]
        return max(maxima) / min(maxima) if maxima else math.inf

    @property
    def passed(self) -> bool:
        return not self.violations and math.isfinite(self.constant) and self.depth_spread <= 2.0


def sparse_domination_check(
    model: KernelModel,
    basis: TentBasis,
    functions: Optional[Dict[str, np.ndarray]] = None,
    points: Optional[np.ndarray] = None,
    seed: int = 0,
    count: int = 50,
    rungs: int = 4,
    per_rung: int = 10,
    tolerance: float = 1e-12,
) -> SparseDominationReport:
    """|Pf(z)| / sparse(f)(z) over a test dictionary and a depth ladder of evaluation points."""
    rng = np.random.default_rng(seed)
    functions = functions if functions is not None else dictionary(basis, rng, count)
    if points is None:
        depths = [basis.top * 2.0 ** (-j) for j in range(1, rungs + 1)]
        points, rung = band_points(basis, depths, per_rung, rng)
    else:
        points = np.atleast_2d(points)
        rung = np.zeros(len(points), dtype=int)
    depth, foot = basis.locate(points)
    names = list(functions)
    F = np.column_stack([functions[k] for k in names])
    if np.any(F < 0):
        raise DomainInputError("Sparse domination test functions must be nonnegative")
    Pf = np.abs(project_columns(model, basis.quad, F, points))
    report = SparseDominationReport()
    for c, name in enumerate(names):
        sparse = _fold(basis.table(F[:, c]), basis, depth, foot, "sum")
        for i in range(len(points)):
            if sparse[i] <= 0 and Pf[i, c] > tolerance:
                report.violations.append((name, f"point {i}"))
                continue
            report.rows.append(DominationRow(name, i, int(rung[i]), float(depth[i]), float(Pf[i, c]), float(sparse[i])))
    logger.info(
        f"Sparse domination: C_s={report.constant:.4g}, depth spread {report.depth_spread:.3g}, "
        f"{len(report.violations)} violations"
    )
    return report


@dataclass
class SlopeRow:
    alpha: float
    ap_constant: float
    norm_lower_bound: float
    trial: str
    maximal_ratio: float


@dataclass
class SlopeReport:
    p: float
    rows: List[SlopeRow] = field(default_factory=list)
    slope: float = math.nan
    flagged: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def bound(self) -> float:
        return max(1.0, 1.0 / (self.p - 1.0))

    @property
    def passed(self) -> bool:
        return math.isfinite(self.slope) and self.slope <= self.bound + 0.3


def _weighted_norm(values: np.ndarray, w: np.ndarray, weights: np.ndarray, p: float) -> np.ndarray:
    return np.sum(np.abs(values) ** p * (w * weights)[:, None], axis=0) ** (1.0 / p)


def weighted_slope_experiment(
    model: KernelModel,
    basis: TentBasis,
    p: float,
    alphas: Sequence[float],
    trials: int = 50,
    seed: int = 0,
    eval_nodes: int = 2000,
) -> SlopeReport:
    """Fit log ||P||_{L^p(w)} (lower bounds) against log [w]_{A_p} over a power-weight ladder.

    Norms of Pf are taken on a random subset of the nodes with rescaled weights. The
    dictionary holds the shared test functions and, per alpha, sigma-shaped indicators.
    """
    _conjugate(p)
    rng = np.random.default_rng(seed)
    quad = basis.quad
    shared = dictionary(basis, rng, trials)
    subset = rng.choice(len(quad), size=min(eval_nodes, len(quad)), replace=False)
    sub_weights = quad.weights[subset] * (len(quad) / len(subset))
    tent_names = [k for k in shared if k.startswith("tent:")]

    names: List[str] = list(shared)
    columns: List[np.ndarray] = [shared[k] for k in names]
    owners: List[Optional[float]] = [None] * len(names)
    for alpha in alphas:
        sigma = WeightModel("power", alpha).dual(p).on_nodes(basis) if alpha != 0 else np.ones(len(quad))
        for name in tent_names:
            names.append(f"sigma:{alpha:g}:{name}")
            columns.append(sigma * shared[name])
            owners.append(alpha)
    F = np.column_stack(columns)
    PF = project_columns(model, quad, F, quad.nodes[subset])

    report = SlopeReport(p=p)
    for alpha in alphas:
        weight = WeightModel("power", alpha) if alpha != 0 else WeightModel("constant")
        ap = ap_constant(weight, p, basis)
        if ap.divergent:
            report.flagged.append(("divergent_weight", f"alpha={alpha:g}"))
            samples_discarded.labels(reason="divergent_weight").inc()
            continue
        w_all = weight.on_nodes(basis)
        use = np.array([o is None or o == alpha for o in owners])
        top = _weighted_norm(PF[:, use], w_all[subset], sub_weights, p)
        bottom = _weighted_norm(F[:, use], w_all, quad.weights, p)
        ratio = np.divide(top, bottom, out=np.full(len(top), np.nan), where=bottom > 0)
        bad = ~np.isfinite(ratio)
        for k in np.flatnonzero(bad):
            report.flagged.append(("non_finite_norm", f"alpha={alpha:g} {np.asarray(names)[use][k]}"))
        best = int(np.nanargmax(np.where(bad, -np.inf, ratio)))

        maximal_vals = np.column_stack(
            [_fold(basis.table(F[:, c]), basis, basis.depth[subset], basis.foot[subset], "max") for c in range(len(shared))]
        )
        m_top = _weighted_norm(maximal_vals, w_all[subset], sub_weights, p)
        m_bottom = _weighted_norm(F[:, : len(shared)], w_all, quad.weights, p)
        report.rows.append(
            SlopeRow(
                alpha=float(alpha),
                ap_constant=ap.constant,
                norm_lower_bound=float(ratio[best]),
                trial=str(np.asarray(names)[use][best]),
                maximal_ratio=float(np.max(m_top / m_bottom)),
            )
        )
    x = np.log([row.ap_constant for row in report.rows])
    y = np.log([row.norm_lower_bound for row in report.rows])
    if len(report.rows) >= 2 and np.ptp(x) > 1e-12:
        report.slope = float(np.polyfit(x, y, 1)[0])
    logger.info(f"Weighted slope at p={p:g}: {report.slope:.4g} (bound {report.bound:.4g})")
    return report
