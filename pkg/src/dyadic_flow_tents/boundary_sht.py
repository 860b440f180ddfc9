"""Boundary samples, dyadic grids and adjacent grid families on the boundary.

Cubes live on the sample: a cube is the set of sample points carrying its label at
its level. Level-``k`` cube ``i`` has center ``centers[k][i]``, and a center that
survives to the next level keeps its position, so a level-``k`` cube ``i`` always
has the level-``k+1`` cube ``i`` among its children.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from prometheus_client import Counter
from scipy.spatial import cKDTree
from typing_extensions import Self

from dyadic_flow_tents.domain_model import (
    DomainSpec,
    as_points,
    boundary_radius,
    defining_function,
    unit_normal,
)
from dyadic_flow_tents.exceptions import ConfigurationError, DiagnosticError, DomainInputError
from dyadic_flow_tents.extremal_basis import EpsLadder, QuasimetricOracle, TauConfig

logger = logging.getLogger(__name__)

CubeId = Tuple[int, int, int]

# quasi-triangle constants are never below 1
KAPPA_FLOOR = 1.0

grid_retries = Counter("dyadic_grid_retries", "Grid constructions retried after an axiom violation")
coverage_failures = Counter("dyadic_coverage_failures", "Test balls covered by no cube of any grid")


def sphere_area(n: int) -> float:
    """Area of the unit sphere S^(2n-1) in C^n."""
    return 2.0 * math.pi ** n / math.factorial(n - 1)


@dataclass
class BoundarySample:
    domain: DomainSpec
    points: np.ndarray
    weights: np.ndarray
    seed: int
    refinement: int = 0
    _tree: Optional[cKDTree] = field(default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def nearest(self, z) -> np.ndarray:
        """Index of the nearest sample point (Euclidean) for each row of ``z``."""
        _, idx = self.tree.query(np.atleast_2d(z))
        return np.asarray(idx, dtype=int)

    def spacing(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Distance from each point to its nearest other sample point."""
        pts = self.points if indices is None else self.points[indices]
        if len(self.points) < 2:
            return np.zeros(len(pts))
        dist, _ = self.tree.query(pts, k=2)
        return dist[:, 1]

    def mass(self, indices) -> float:
        return float(self.weights[np.asarray(indices, dtype=int)].sum())

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def to_document(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "refinement": self.refinement,
            "points": self.points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_document(cls, domain: DomainSpec, doc: Dict[str, Any]) -> Self:
        return cls(
            domain=domain,
            points=np.asarray(doc["points"], dtype=float),
            weights=np.asarray(doc["weights"], dtype=float),
            seed=int(doc["seed"]),
            refinement=int(doc.get("refinement", 0)),
        )


def _ray_points(domain: DomainSpec, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Boundary points along uniformly random rays with their ray-map Jacobians."""
    u = rng.standard_normal((count, domain.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    s = boundary_radius(domain, u)
    pts = s[:, None] * u
    bad = np.abs(defining_function(domain, pts)) >= 1e-9
    while np.any(bad):
        logger.debug(f"Resampling {int(bad.sum())} rays whose boundary root failed")
        fresh = rng.standard_normal((int(bad.sum()), domain.dim))
        fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
        u[bad] = fresh
        s[bad] = boundary_radius(domain, fresh)
        pts = s[:, None] * u
        bad = np.abs(defining_function(domain, pts)) >= 1e-9
    cosine = np.sum(unit_normal(domain, pts) * u, axis=1)
    jacobian = s ** (domain.dim - 1) / cosine
    return pts, jacobian


def sample_boundary(domain: DomainSpec, count: int, seed: int = 0, refinement: int = 0) -> BoundarySample:
    """Ray-projected boundary sample with surface quadrature weights.

    With ``refinement > 0`` another ``refinement * count`` rays are drawn and their
    weights are pooled onto the nearest sample point, so each weight approximates the
    surface measure of the point's nearest-point cell.
    """
    if count < 500:
        raise ConfigurationError(f"sample_boundary needs at least 500 points, got {count}", "count")
    if not domain.bounded:
        raise DomainInputError("Cannot sample the boundary of an unbounded domain")
    rng = np.random.default_rng(seed)
    total = count * (1 + refinement)
    pts, jac = _ray_points(domain, total, rng)
    raw = sphere_area(domain.n) / total * jac
    points = pts[:count]
    weights = raw[:count].copy()
    if refinement:
        _, owner = cKDTree(points).query(pts[count:])
        weights += np.bincount(owner, weights=raw[count:], minlength=count)
    sample = BoundarySample(domain=domain, points=points, weights=weights, seed=seed, refinement=refinement)
    logger.info(f"Sampled {count} boundary points of {domain.kind}, total mass {sample.total_mass:.6g}")
    return sample


def check_delta_conditions(delta: float, kappa: Optional[float] = None, c_omega: Optional[float] = None) -> None:
    """Raise when the effective grid ratio violates conditions (a) or (b).

    An unknown ``kappa`` is taken at its floor 1, so condition (a) always applies.
    Condition (b) needs ``c_omega``.
    """
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}", "delta")
    kappa = KAPPA_FLOOR if kappa is None else max(kappa, KAPPA_FLOOR)
    if 96.0 * kappa ** 6 * delta > 1.0:
        raise ConfigurationError(
            f"condition (a) 96*kappa^6*delta <= 1 fails: kappa={kappa:.4g}, delta={delta:.4g}", "(a)"
        )
    if c_omega is not None and delta > 1.0 / (100.0 * c_omega):
        raise ConfigurationError(
            f"condition (b) delta <= 1/(100*C_Omega) fails: C_Omega={c_omega:.4g}, delta={delta:.4g}", "(b)"
        )


def minimal_stride(delta: float, kappa: Optional[float] = None, c_omega: Optional[float] = None) -> int:
    """Smallest level stride N with delta^N satisfying both conditions."""
    stride = 1
    while stride < 64:
        try:
            check_delta_conditions(delta ** stride, kappa, c_omega)
            return stride
        except ConfigurationError:
            stride += 1
    raise ConfigurationError(f"No level stride makes delta={delta} admissible", "(a)")


def first_level(domain: DomainSpec, delta: float, thresholds: Sequence[float] = ()) -> int:
    """N0: smallest k with delta^k below the flow band and the supplied scale thresholds."""
    limit = min([domain.flow_band, *thresholds])
    k = 1
    while delta ** k > limit:
        k += 1
    return k


@dataclass
class DyadicCube:
    id: CubeId
    center: int
    members: np.ndarray
    parent: Optional[CubeId]
    children: List[CubeId]
    sidelength: float

    @property
    def level(self) -> int:
        return self.id[1]


@dataclass
class GridVerification:
    empty_cubes: int = 0
    nesting_violations: int = 0
    childless_cubes: int = 0
    parent_violations: int = 0
    center_violations: int = 0
    separation_violations: int = 0
    inner_violations: int = 0
    frakC: float = 0.0
    eps_grid: float = 1.0
    inner_factor: float = 1.0

    @property
    def axiom_violations(self) -> int:
        return (
            self.empty_cubes
            + self.nesting_violations
            + self.childless_cubes
            + self.parent_violations
            + self.center_violations
            + self.separation_violations
            + int(not self.eps_grid > 0)
        )


@dataclass
class DyadicGrid:
    sample: BoundarySample
    delta: float
    n0: int
    centers: List[np.ndarray]
    labels: List[np.ndarray]
    parents: List[np.ndarray]
    seed: int
    grid_index: int = 0
    base_delta: Optional[float] = None
    stride: int = 1
    frakC: float = math.inf
    eps_grid: float = 0.0
    inner_factor: float = 0.0
    warnings: List[str] = field(default_factory=list)
    _members: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, init=False, repr=False)

    @property
    def depth(self) -> int:
        return len(self.centers) - 1

    @property
    def levels(self) -> range:
        return range(self.n0, self.n0 + len(self.centers))

    @property
    def finest(self) -> int:
        return self.n0 + self.depth

    def slot(self, level: int) -> int:
        if level not in self.levels:
            raise ConfigurationError(f"Level {level} outside {self.n0}..{self.finest}", "level")
        return level - self.n0

    def sidelength(self, level: int) -> float:
        return self.delta ** level

    def cube_count(self, level: int) -> int:
        return len(self.centers[self.slot(level)])

    def labels_at(self, level: int) -> np.ndarray:
        return self.labels[self.slot(level)]

    def members(self, level: int, index: int) -> np.ndarray:
        key = (level, index)
        if key not in self._members:
            self._members[key] = np.flatnonzero(self.labels_at(level) == index)
        return self._members[key]

    def masses(self, level: int) -> np.ndarray:
        return np.bincount(self.labels_at(level), weights=self.sample.weights, minlength=self.cube_count(level))

    def parent(self, level: int, index: int) -> Optional[int]:
        s = self.slot(level)
        return None if s == 0 else int(self.parents[s][index])

    def children(self, level: int, index: int) -> np.ndarray:
        if level == self.finest:
            return np.array([], dtype=int)
        return np.flatnonzero(self.parents[self.slot(level) + 1] == index)

    def ancestors(self, level: int, index: int) -> List[Tuple[int, int]]:
        """The chain (level, index) from the given cube up to level N0, inclusive."""
        chain = [(level, index)]
        while level > self.n0:
            index = int(self.parents[self.slot(level)][index])
            level -= 1
            chain.append((level, index))
        return chain

    def cube(self, level: int, index: int) -> DyadicCube:
        parent = self.parent(level, index)
        return DyadicCube(
            id=(self.grid_index, level, index),
            center=int(self.centers[self.slot(level)][index]),
            members=self.members(level, index),
            parent=None if parent is None else (self.grid_index, level - 1, parent),
            children=[(self.grid_index, level + 1, int(c)) for c in self.children(level, index)],
            sidelength=self.sidelength(level),
        )

    def cubes(self, level: int) -> Iterator[DyadicCube]:
        for index in range(self.cube_count(level)):
            yield self.cube(level, index)

    def smallest_containing(self, point_indices: np.ndarray) -> Optional[Tuple[int, int]]:
        """Finest (level, index) whose members include every given sample point."""
        point_indices = np.asarray(point_indices, dtype=int)
        if point_indices.size == 0:
            return None
        for level in reversed(self.levels):
            labs = self.labels_at(level)[point_indices]
            if np.all(labs == labs[0]):
                return level, int(labs[0])
        return None

    def truncate_to(self, n0: int) -> None:
        drop = n0 - self.n0
        if drop <= 0:
            return
        if drop > self.depth:
            raise ConfigurationError(f"Cannot truncate grid {self.grid_index} to level {n0}", "depth")
        self.centers = self.centers[drop:]
        self.labels = self.labels[drop:]
        self.parents = [np.full(len(self.centers[0]), -1)] + self.parents[drop + 1:]
        self.n0 = n0
        self._members.clear()

    def to_document(self) -> Dict[str, Any]:
        levels = []
        for level in self.levels:
            s = self.slot(level)
            cubes = []
            for i, c in enumerate(self.centers[s]):
                cubes.append(
                    {
                        "center": int(c),
                        "members": self.members(level, i).tolist(),
                        "parent": None if s == 0 else int(self.parents[s][i]),
                    }
                )
            levels.append({"level": level, "cubes": cubes})
        return {
            "grid_index": self.grid_index,
            "seed": self.seed,
            "delta": self.delta,
            "n0": self.n0,
            "frakC": self.frakC,
            "eps_grid": self.eps_grid,
            "inner_factor": self.inner_factor,
            "warnings": list(self.warnings),
            "levels": levels,
        }

    @classmethod
    def from_document(cls, sample: BoundarySample, doc: Dict[str, Any]) -> Self:
        centers, labels, parents = [], [], []
        for entry in doc["levels"]:
            cubes = entry["cubes"]
            centers.append(np.array([c["center"] for c in cubes], dtype=int))
            lab = np.full(len(sample), -1, dtype=int)
            for i, c in enumerate(cubes):
                lab[np.asarray(c["members"], dtype=int)] = i
            labels.append(lab)
            parents.append(np.array([-1 if c["parent"] is None else c["parent"] for c in cubes], dtype=int))
        return cls(
            sample=sample,
            delta=float(doc["delta"]),
            n0=int(doc["n0"]),
            centers=centers,
            labels=labels,
            parents=parents,
            seed=int(doc["seed"]),
            grid_index=int(doc["grid_index"]),
            frakC=float(doc["frakC"]),
            eps_grid=float(doc["eps_grid"]),
            inner_factor=float(doc["inner_factor"]),
            warnings=list(doc.get("warnings", [])),
        )


def _nearest_center(R: np.ndarray, rows: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Position in ``centers`` of the nearest center, ties to the smaller point index."""
    order = np.argsort(centers, kind="stable")
    pick = np.argmin(R[np.ix_(rows, centers[order])], axis=1)
    return order[pick]


def _construct(R: np.ndarray, delta: float, n0: int, depth: int, rng: np.random.Generator):
    size = R.shape[0]
    order = rng.permutation(size)
    centers: List[np.ndarray] = []
    chosen: List[int] = []
    for slot in range(depth + 1):
        ell = delta ** (n0 + slot)
        covered = np.zeros(size, dtype=bool)
        for c in chosen:
            covered |= R[c] < ell
        chosen = list(chosen)
        for p in order:
            if covered[p]:
                continue
            chosen.append(int(p))
            covered |= R[p] < ell
        centers.append(np.array(chosen, dtype=int))

    everyone = np.arange(size)
    labels: List[np.ndarray] = [None] * (depth + 1)
    parents: List[np.ndarray] = [np.full(len(centers[0]), -1, dtype=int)]
    for slot in range(1, depth + 1):
        parents.append(_nearest_center(R, centers[slot], centers[slot - 1]))
    labels[depth] = _nearest_center(R, everyone, centers[depth])
    for slot in range(depth, 0, -1):
        labels[slot - 1] = parents[slot][labels[slot]]
    return centers, labels, parents


def verify_grid(grid: DyadicGrid, R: np.ndarray, block: int = 256) -> GridVerification:
    """Exhaustive check of the grid axioms on the sample; also fills in the constants."""
    report = GridVerification(frakC=0.0, eps_grid=1.0, inner_factor=1.0)
    weights = grid.sample.weights
    for level in grid.levels:
        s = grid.slot(level)
        labs = grid.labels[s]
        centers = grid.centers[s]
        count = len(centers)
        ell = grid.sidelength(level)
        if np.any(labs < 0) or np.any(labs >= count):
            report.empty_cubes += int(np.count_nonzero((labs < 0) | (labs >= count)))
            continue
        sizes = np.bincount(labs, minlength=count)
        report.empty_cubes += int(np.count_nonzero(sizes == 0))
        report.center_violations += int(np.count_nonzero(labs[centers] != np.arange(count)))

        sep = R[np.ix_(centers, centers)]
        np.fill_diagonal(sep, np.inf)
        report.separation_violations += int(np.count_nonzero(sep < ell)) // 2

        if s > 0:
            par = grid.parents[s]
            prev_count = len(grid.centers[s - 1])
            bad = (par < 0) | (par >= prev_count)
            report.parent_violations += int(np.count_nonzero(bad))
            if not np.any(bad):
                report.nesting_violations += int(np.count_nonzero(grid.labels[s - 1] != par[labs]))
                report.childless_cubes += int(np.count_nonzero(np.bincount(par, minlength=prev_count) == 0))
                child_mass = np.bincount(labs, weights=weights, minlength=count)
                parent_mass = np.bincount(grid.labels[s - 1], weights=weights, minlength=prev_count)
                report.eps_grid = min(report.eps_grid, float(np.min(child_mass / parent_mass[par])))

        for start in range(0, count, block):
            idx = np.arange(start, min(start + block, count))
            rows = R[centers[idx]]
            own = labs[None, :] == idx[:, None]
            outer = np.max(np.where(own, rows, 0.0), axis=1) / ell
            inner = np.min(np.where(own, np.inf, rows), axis=1) / ell
            report.frakC = max(report.frakC, float(outer.max()))
            report.inner_factor = min(report.inner_factor, float(min(inner.min(), 1.0)))
            report.inner_violations += int(np.count_nonzero(inner < 1.0))
    return report


def build_grid(
    sample: BoundarySample,
    oracle: QuasimetricOracle,
    delta: float,
    depth: int,
    seed: int,
    stride: Optional[int] = None,
    n0: Optional[int] = None,
    kappa: Optional[float] = None,
    c_omega: Optional[float] = None,
    grid_index: int = 0,
    retries: int = 5,
    thresholds: Sequence[float] = (),
    enforce_conditions: bool = True,
) -> DyadicGrid:
    """Nested greedy nets with nearest-center parents, verified after construction.

    ``delta`` is the base ratio; the grid uses levels of ``delta ** stride`` and
    ``stride=None`` coarsens to the smallest admissible stride. ``thresholds`` are the
    calibrated small-scale limits that lower the first level's sidelength.

    ``enforce_conditions=False`` builds a diagnostic grid whose ratio may violate
    conditions (a) and (b); the grid carries a warning saying so.
    """
    if depth < 3:
        raise ConfigurationError(f"Grid depth must be at least 3, got {depth}", "depth")
    if stride is None:
        stride = minimal_stride(delta, kappa, c_omega) if enforce_conditions else 1
    if stride < 1:
        raise ConfigurationError(f"Level stride must be positive, got {stride}", "stride")
    effective = delta ** stride
    unchecked = None
    if enforce_conditions:
        check_delta_conditions(effective, kappa, c_omega)
    else:
        try:
            check_delta_conditions(effective, kappa, c_omega)
        except ConfigurationError as exc:
            if exc.condition not in ("(a)", "(b)"):
                raise
            unchecked = f"Diagnostic grid: {exc}"
            logger.warning(unchecked)
    if n0 is None:
        n0 = first_level(sample.domain, effective, thresholds)
    R = oracle.rho_matrix()

    for attempt in range(retries + 1):
        attempt_seed = seed + 1_000_003 * attempt
        centers, labels, parents = _construct(R, effective, n0, depth, np.random.default_rng(attempt_seed))
        grid = DyadicGrid(
            sample=sample,
            delta=effective,
            n0=n0,
            centers=centers,
            labels=labels,
            parents=parents,
            seed=attempt_seed,
            grid_index=grid_index,
            base_delta=delta,
            stride=stride,
        )
        while len(sample) > 1 and grid.depth > 0 and len(grid.centers[0]) < 2:
            message = f"Level {grid.n0} has a single cube; depth truncated to {grid.depth - 1}"
            logger.warning(message)
            grid.truncate_to(grid.n0 + 1)
            grid.warnings.append(message)
        verification = verify_grid(grid, R)
        if verification.axiom_violations == 0:
            break
        grid_retries.inc()
        logger.warning(f"Grid {grid_index} attempt {attempt} violates the axioms; retrying")
    else:
        raise DiagnosticError(f"Grid {grid_index} violates the axioms after {retries} retries")

    grid.frakC = verification.frakC
    grid.eps_grid = verification.eps_grid
    grid.inner_factor = verification.inner_factor
    if unchecked:
        grid.warnings.append(unchecked)
    logger.info(
        f"Grid {grid_index}: levels {grid.n0}..{grid.finest}, cubes "
        f"{[len(c) for c in grid.centers]}, frakC={grid.frakC:.4g}, eps_grid={grid.eps_grid:.4g}"
    )
    return grid


@dataclass
class CubeMatch:
    grid_index: int
    level: Optional[int]
    index: Optional[int]
    sidelength: float
    root: bool = False
    fallback: bool = False


@dataclass
class GridFamily:
    grids: List[DyadicGrid]
    seeds: List[int]
    oracle: QuasimetricOracle
    frakC_tilde: float = math.inf
    coverage_failure_rate: float = 0.0
    coverage_failures: List[Tuple[int, float]] = field(default_factory=list)
    tested_balls: int = 0
    tau1: Optional[float] = None
    tau2: Optional[float] = None

    @property
    def sample(self) -> BoundarySample:
        return self.grids[0].sample

    @property
    def domain(self) -> DomainSpec:
        return self.sample.domain

    @property
    def n0(self) -> int:
        return self.grids[0].n0

    @property
    def delta(self) -> float:
        return self.grids[0].delta

    @property
    def valid(self) -> bool:
        return self.coverage_failure_rate <= 0.01

    def to_document(self) -> Dict[str, Any]:
        ladder = self.oracle.ladder
        return {
            "domain": self.domain.to_document(),
            "sample": self.sample.to_document(),
            "ladder": {"minimum": ladder.minimum, "ratio": ladder.ratio, "cap": ladder.cap},
            "oracle_seed": self.oracle.seed,
            "seeds": list(self.seeds),
            "base_delta": self.grids[0].base_delta,
            "stride": self.grids[0].stride,
            "frakC_tilde": self.frakC_tilde,
            "coverage_failure_rate": self.coverage_failure_rate,
            "tested_balls": self.tested_balls,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "grids": [g.to_document() for g in self.grids],
        }

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_document(), sort_keys=True))

    @classmethod
    def from_document(cls, doc: Dict[str, Any], config: Optional[TauConfig] = None) -> Self:
        domain = DomainSpec.from_document(doc["domain"])
        sample = BoundarySample.from_document(domain, doc["sample"])
        ladder = EpsLadder(**doc["ladder"])
        oracle = QuasimetricOracle(domain, sample.points, ladder, config, seed=int(doc.get("oracle_seed", 0)))
        grids = [DyadicGrid.from_document(sample, g) for g in doc["grids"]]
        for g in grids:
            g.base_delta = doc.get("base_delta")
            g.stride = int(doc.get("stride", 1))
        return cls(
            grids=grids,
            seeds=list(doc["seeds"]),
            oracle=oracle,
            frakC_tilde=float(doc["frakC_tilde"]),
            coverage_failure_rate=float(doc["coverage_failure_rate"]),
            tested_balls=int(doc.get("tested_balls", 0)),
            tau1=doc.get("tau1"),
            tau2=doc.get("tau2"),
        )

    @classmethod
    def load(cls, path: Union[str, Path], config: Optional[TauConfig] = None) -> Self:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DomainInputError(f"Cannot read grid file {path}: {e}") from e
        return cls.from_document(doc, config)


def _best_cover(family_grids: Sequence[DyadicGrid], members: np.ndarray) -> Optional[Tuple[float, int, int, int]]:
    best = None
    for g in family_grids:
        found = g.smallest_containing(members)
        if found is None:
            continue
        level, index = found
        key = (g.sidelength(level), g.grid_index, level, index)
        if best is None or key < best:
            best = key
    return best


def build_adjacent_family(
    sample: BoundarySample,
    oracle: QuasimetricOracle,
    delta: float,
    depth: int,
    k0: int = 8,
    seeds: Optional[Sequence[int]] = None,
    stride: Optional[int] = None,
    kappa: Optional[float] = None,
    c_omega: Optional[float] = None,
    test_centers: int = 200,
    test_scales: int = 6,
    workers: int = 1,
    thresholds: Sequence[float] = (),
    enforce_conditions: bool = True,
) -> GridFamily:
    """``k0`` independent grids plus the empirical covering constant."""
    if k0 < 1:
        raise ConfigurationError(f"A family needs at least one grid, got k0={k0}", "k0")
    if k0 < 3:
        logger.warning(f"Family of {k0} grids is below the recommended minimum of 3")
    seeds = list(seeds) if seeds is not None else list(range(k0))
    if len(seeds) != k0:
        raise ConfigurationError(f"Expected {k0} seeds, got {len(seeds)}", "seeds")
    R = oracle.rho_matrix()

    def build(i: int) -> DyadicGrid:
        return build_grid(
            sample,
            oracle,
            delta,
            depth,
            seeds[i],
            stride,
            kappa=kappa,
            c_omega=c_omega,
            grid_index=i,
            thresholds=thresholds,
            enforce_conditions=enforce_conditions,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grids = list(pool.map(build, range(k0)))
    else:
        grids = [build(i) for i in range(k0)]
    common = max(g.n0 for g in grids)
    for g in grids:
        if g.n0 != common:
            g.truncate_to(common)
            g.warnings.append(f"Truncated to the family's common first level {common}")

    family = GridFamily(grids=grids, seeds=seeds, oracle=oracle)
    rng = np.random.default_rng(seeds[0])
    centers = rng.choice(len(sample), size=min(test_centers, len(sample)), replace=False)
    top = grids[0].sidelength(common)
    ratios = []
    for c in centers:
        for j in range(1, test_scales + 1):
            eps = top * 2.0 ** -j
            members = np.flatnonzero(R[c] < eps)
            best = _best_cover(grids, members)
            if best is None:
                family.coverage_failures.append((int(c), eps))
                continue
            ratios.append(best[0] / eps)
    family.tested_balls = len(centers) * test_scales
    if family.coverage_failures:
        coverage_failures.inc(len(family.coverage_failures))
    family.coverage_failure_rate = len(family.coverage_failures) / max(family.tested_balls, 1)
    family.frakC_tilde = float(max(ratios)) if ratios else math.inf
    logger.info(
        f"Family of {k0} grids: frakC_tilde={family.frakC_tilde:.4g}, "
        f"coverage failures {len(family.coverage_failures)}/{family.tested_balls}"
    )
    return family


def find_containing_cube(
    family: GridFamily,
    xi,
    eps: float,
    center_index: Optional[int] = None,
) -> CubeMatch:
    """Smallest family cube containing the sample points of ``B(xi, eps)``.

    ``center_index`` names ``xi`` as a sample point and skips recomputing its frames.
    A ball holding no sample point is represented by the sample point nearest to ``xi``.
    """
    top = family.grids[0].sidelength(family.n0)
    if eps >= top:
        return CubeMatch(grid_index=0, level=None, index=None, sidelength=math.inf, root=True)
    if center_index is not None:
        distances = family.oracle.rho_row(center_index)
    else:
        distances = family.oracle.rho_from_point(as_points(family.domain, xi))
    members = np.flatnonzero(distances < eps)
    if members.size == 0:
        members = family.sample.nearest(xi)
    best = _best_cover(family.grids, members)
    if best is None:
        return CubeMatch(grid_index=0, level=None, index=None, sidelength=math.inf, root=True, fallback=True)
    ell, g, level, index = best
    return CubeMatch(grid_index=g, level=level, index=index, sidelength=ell)
