"""Bergman kernels of the model domains, quadrature projections and the kernel-tent scan."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln, xlogy
from scipy.stats import qmc

from dyadic_flow_tents.boundary_sht import GridFamily, find_containing_cube
from dyadic_flow_tents.domain_model import (
    AMBIENT_BOX,
    DomainSpec,
    as_points,
    defining_function,
    samples_discarded,
    to_complex,
)
from dyadic_flow_tents.exceptions import AccuracyError, DomainInputError, ProjectionError
from dyadic_flow_tents.extremal_basis import EpsLadder, TauConfig, extremal_frame, frame_ladder
from dyadic_flow_tents.flow_tents import FlowIntegrator, Tent, flow, nearest_project, tent_contains_many
from dyadic_flow_tents.level_set_geometry import mcneal_stein_volume, tent_volume

logger = logging.getLogger(__name__)

KERNEL_MODES = ("ball_closed_form", "reinhardt_series")
MAX_CUTOFF = 400
CHUNK = 256


def _require_reinhardt(domain: DomainSpec) -> None:
    if not domain.bounded:
        raise DomainInputError("Bergman kernels are provided for the bounded Reinhardt models only")


def log_monomial_moment(domain: DomainSpec, alpha) -> np.ndarray:
    """log ||z^alpha||^2 over sum |z_j|^(2 m_j) < 1 via the Dirichlet integral."""
    _require_reinhardt(domain)
    alpha = np.asarray(alpha, dtype=float)
    m = domain.powers.astype(float)
    a = (alpha + 1.0) / m
    return (
        domain.n * math.log(math.pi)
        - float(np.sum(np.log(m)))
        + np.sum(gammaln(a), axis=-1)
        - gammaln(1.0 + np.sum(a, axis=-1))
    )


def monomial_moment(domain: DomainSpec, alpha) -> float:
    return float(np.exp(log_monomial_moment(domain, alpha)))


def domain_volume(domain: DomainSpec) -> float:
    return monomial_moment(domain, np.zeros(domain.n))


def _shell(n: int, degree: int) -> np.ndarray:
    """All multi-indices of length ``n`` and total degree ``degree``."""
    rows = []
    for bars in itertools.combinations(range(degree + n - 1), n - 1):
        cuts = (-1,) + bars + (degree + n - 1,)
        rows.append([cuts[i + 1] - cuts[i] - 1 for i in range(n)])
    return np.asarray(rows, dtype=int)


def _moment_cache_path(cache_dir: Union[str, Path], domain: DomainSpec, cutoff: int) -> Path:
    return Path(cache_dir) / f"moments-{domain.digest()}-{cutoff}.npz"


@dataclass
class KernelModel:
    """Kernel evaluator; series mode is accurate while both points have gauge at most ``pair_bound``.

    The gauge of z is sum |z_j|^(2 m_j), so on the ball the compactum is |z| <= 1 - margin.
    """

    domain: DomainSpec
    mode: str
    pair_bound: float = 0.64
    series_cutoff: int = 0
    alphas: Optional[np.ndarray] = None
    log_moments: Optional[np.ndarray] = None

    @property
    def moments(self) -> np.ndarray:
        return np.exp(self.log_moments) if self.log_moments is not None else np.array([])

    def check_pairs(self, z: np.ndarray, xi: np.ndarray) -> None:
        if self.mode != "reinhardt_series":
            return
        q = np.maximum(gauge(self.domain, z), gauge(self.domain, xi))
        if np.any(q > self.pair_bound * (1.0 + 1e-12)):
            raise AccuracyError(
                f"Series kernel evaluated at gauge {float(np.max(q)):.4g} beyond {self.pair_bound}"
            )


def gauge(domain: DomainSpec, z: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(to_complex(z)) ** (2 * domain.powers), axis=-1)


def _log_monomial_sup(domain: DomainSpec, alphas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exponent A and log of max |z^alpha|^2 over the gauge ball of radius one."""
    a = alphas / domain.powers.astype(float)
    total = a.sum(axis=-1)
    return total, np.sum(xlogy(a, a), axis=-1) - xlogy(total, total)


def _tail_floor(domain: DomainSpec, pair_bound: float) -> float:
    # |K| of the ball at |<z, xi>| = pair_bound, used as the accuracy scale
    return math.exp(-float(log_monomial_moment(domain, np.zeros(domain.n)))) / (1.0 + pair_bound) ** (domain.n + 1)


def select_cutoff(domain: DomainSpec, pair_bound: float, tolerance: float = 1e-6) -> int:
    """Least degree whose geometric shell-tail bound falls below ``tolerance`` of the kernel scale."""
    floor = tolerance * _tail_floor(domain, pair_bound)
    previous = None
    for degree in range(MAX_CUTOFF):
        alphas = _shell(domain.n, degree)
        exponent, log_sup = _log_monomial_sup(domain, alphas)
        # |z^alpha xi^alpha| <= pair_bound^A sup|z^alpha|^2 on the compactum
        shell = float(np.sum(np.exp(exponent * math.log(pair_bound) + log_sup - log_monomial_moment(domain, alphas))))
        if previous is not None and previous > 0:
            ratio = shell / previous
            if ratio < 1.0 and shell / (1.0 - ratio) < floor:
                return degree - 1
        previous = shell
    raise AccuracyError(f"No series cutoff below {MAX_CUTOFF} reaches {tolerance} at gauge {pair_bound}")


def build_kernel_model(
    domain: DomainSpec,
    mode: Optional[str] = None,
    margin: float = 0.2,
    cutoff: Optional[int] = None,
    tolerance: float = 1e-6,
    cache_dir: Optional[Union[str, Path]] = None,
) -> KernelModel:
    """Kernel model for the compactum of gauge at most ``(1 - margin)^2``."""
    _require_reinhardt(domain)
    mode = mode or ("ball_closed_form" if domain.kind == "ball" else "reinhardt_series")
    if mode not in KERNEL_MODES:
        raise DomainInputError(f"Unknown kernel mode {mode!r}")
    if mode == "ball_closed_form" and domain.kind != "ball":
        raise DomainInputError("The closed-form kernel exists for the ball only")
    pair_bound = (1.0 - margin) ** 2
    if mode == "ball_closed_form":
        return KernelModel(domain=domain, mode=mode, pair_bound=pair_bound)

    cutoff = cutoff if cutoff is not None else select_cutoff(domain, pair_bound, tolerance)
    path = _moment_cache_path(cache_dir, domain, cutoff) if cache_dir is not None else None
    if path is not None and path.exists():
        table = np.load(path)
        alphas, log_moments = table["alphas"], table["log_moments"]
        logger.debug(f"Loaded {len(alphas)} moments from {path}")
    else:
        alphas = np.vstack([_shell(domain.n, k) for k in range(cutoff + 1)])
        log_moments = log_monomial_moment(domain, alphas)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, alphas=alphas, log_moments=log_moments)
    logger.info(f"Series kernel for {domain.kind} with cutoff {cutoff} ({len(alphas)} monomials)")
    return KernelModel(
        domain=domain,
        mode=mode,
        pair_bound=pair_bound,
        series_cutoff=cutoff,
        alphas=alphas,
        log_moments=log_moments,
    )


def kernel(model: KernelModel, z, xi) -> Union[complex, np.ndarray]:
    """K(z, xi) for broadcastable stacks of points."""
    domain = model.domain
    z = as_points(domain, z)
    xi = as_points(domain, xi)
    single = z.ndim == 1 and xi.ndim == 1
    z2, xi2 = np.broadcast_arrays(np.atleast_2d(z), np.atleast_2d(xi))
    model.check_pairs(z2, xi2)
    w = to_complex(z2) * np.conj(to_complex(xi2))
    if model.mode == "ball_closed_form":
        n = domain.n
        out = math.factorial(n) / (math.pi ** n * (1.0 - w.sum(axis=-1)) ** (n + 1))
    else:
        coef = np.exp(-model.log_moments)
        out = np.empty(len(w), dtype=complex)
        for start in range(0, len(w), CHUNK):
            block = w[start:start + CHUNK]
            powers = block[:, :, None] ** np.arange(model.series_cutoff + 1)
            terms = np.ones((len(block), len(model.alphas)), dtype=complex)
            for j in range(domain.n):
                terms *= powers[:, j, model.alphas[:, j]]
            out[start:start + CHUNK] = terms @ coef
    return complex(out[0]) if single else out


@dataclass
class QuadratureScheme:
    nodes: np.ndarray
    weights: np.ndarray
    seed: int
    candidates: int
    box_volume: float

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return len(self.nodes)


def build_quadrature(domain: DomainSpec, nodes: int = 200_000, seed: int = 0) -> QuadratureScheme:
    """Scrambled Sobol points of the ambient box kept inside the domain, equal weights."""
    _require_reinhardt(domain)
    half = AMBIENT_BOX / 2
    box = AMBIENT_BOX ** domain.dim
    acceptance = domain_volume(domain) / box
    power = int(math.ceil(math.log2(max(nodes / acceptance, 2.0))))
    sobol = qmc.Sobol(d=domain.dim, scramble=True, seed=seed)
    pts = qmc.scale(sobol.random_base2(power), -half, half)
    inside = pts[defining_function(domain, pts) < 0]
    weights = np.full(len(inside), box / len(pts))
    scheme = QuadratureScheme(nodes=inside, weights=weights, seed=seed, candidates=len(pts), box_volume=box)
    logger.info(f"Quadrature with {len(inside)} nodes, total {scheme.total:.6g}")
    return scheme


@dataclass
class ProjectionValue:
    value: complex
    stderr: float


def project(
    model: KernelModel,
    quad: QuadratureScheme,
    f: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
    z,
) -> Union[ProjectionValue, List[ProjectionValue]]:
    """P f(z) = sum K(z, node) f(node) weight, with a plain Monte Carlo error bar."""
    z = as_points(model.domain, z)
    values = np.asarray(f(quad.nodes) if callable(f) else f)
    if values.shape != (len(quad),):
        raise DomainInputError(f"Expected {len(quad)} sampled values, got shape {values.shape}")
    out = []
    for point in np.atleast_2d(z):
        integrand = kernel(model, point[None, :], quad.nodes) * values
        mean = integrand.sum() / quad.candidates
        second = float(np.sum(np.abs(integrand) ** 2)) / quad.candidates
        spread = max(second - abs(mean) ** 2, 0.0)
        out.append(ProjectionValue(complex(quad.box_volume * mean), quad.box_volume * math.sqrt(spread / quad.candidates)))
    return out[0] if z.ndim == 1 else out


@dataclass
class KernelTentRow:
    depth: float
    rho: float
    level: Optional[int]
    root: bool
    bound: float
    contained: bool
    grid_index: int = 0
    index: Optional[int] = None


@dataclass
class KernelTentReport:
    rows: List[KernelTentRow] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    failures: int = 0
    rho_lower_ratio: float = math.inf
    mcneal_stein_ratio: List[float] = field(default_factory=list)

    @property
    def pairs(self) -> int:
        return len(self.rows)

    @property
    def A(self) -> float:
        return max((row.bound for row in self.rows), default=0.0)

    @property
    def failure_rate(self) -> float:
        return self.failures / max(self.pairs, 1)

    @property
    def passed(self) -> bool:
        return self.pairs > 0 and self.failure_rate <= 0.02

    def by_rung(self, top: float) -> Dict[int, float]:
        """Largest bound per dyadic depth rung below ``top``."""
        rungs: Dict[int, float] = {}
        for row in self.rows:
            k = max(0, int(math.floor(math.log2(top / row.depth))))
            rungs[k] = max(rungs.get(k, 0.0), row.bound)
        return rungs


class KernelTentScanner:
    """Selects the tent for a pair (z, xi) and bounds |K(z, xi)| Vol(T^flow(Q)).

    Q is the smallest family cube holding the rho-ball of ``selection_scale * rho(z, xi)``
    around the nearest point projection of ``z``, enlarged along its ancestry until the
    tent contains both points. Deep pairs, and pairs whose rho-ball reaches the top level, use the
    root tent.
    """

    def __init__(
        self,
        model: KernelModel,
        family: GridFamily,
        selection_scale: float = 2.0,
        integrator: Optional[FlowIntegrator] = None,
        config: Optional[TauConfig] = None,
        seed: int = 0,
    ):
        self.model = model
        self.family = family
        self.selection_scale = selection_scale
        self.integrator = integrator
        self.config = config
        self.seed = seed
        self.top = family.grids[0].sidelength(family.n0)
        self.eps = EpsLadder(minimum=min(self.top * family.delta ** 6, 1e-5), cap=family.oracle.cap).values(family.domain)
        self.root_volume = domain_volume(family.domain)
        self._volumes: Dict[Tuple[int, int, int], float] = {}

    def volume(self, g: int, level: int, index: int) -> float:
        key = (g, level, index)
        if key not in self._volumes:
            tent = Tent(g, level, index)
            est = tent_volume(self.family.grids[g], tent, method="coarea_quadrature", integrator=self.integrator)
            self._volumes[key] = est.value
        return self._volumes[key]

    def pair(self, z, xi, tag: int = 0) -> Tuple[KernelTentRow, Optional[np.ndarray]]:
        """Row for one pair and the projection base point (None on the deep root branch)."""
        domain = self.family.domain
        z = as_points(domain, z)
        xi = as_points(domain, xi)
        both = np.vstack([z, xi])
        depth = float(np.max(-defining_function(domain, both)))
        value = abs(kernel(self.model, z, xi))
        if depth >= self.top:
            return KernelTentRow(depth, math.inf, None, True, value * self.root_volume, True), None

        base = nearest_project(domain, z)
        rungs = frame_ladder(domain, base, self.eps, self.seed + tag, self.config).first_rung(both)
        beyond = int(rungs.max()) >= len(self.eps)
        rho_t = math.inf if beyond else float(self.eps[int(rungs.max())])
        if beyond or self.selection_scale * rho_t >= self.top:
            return KernelTentRow(depth, rho_t, None, True, value * self.root_volume, True), base

        match = find_containing_cube(self.family, base, self.selection_scale * rho_t)
        if match.root:
            return KernelTentRow(depth, rho_t, None, True, value * self.root_volume, True), base
        g = match.grid_index
        grid = self.family.grids[g]
        chain = grid.ancestors(match.level, match.index)
        for position, (level, index) in enumerate(chain):
            if np.all(tent_contains_many(grid, Tent(g, level, index), both, self.integrator)):
                bound = value * self.volume(g, level, index)
                return KernelTentRow(depth, rho_t, level, False, bound, position == 0, g, index), base
        return KernelTentRow(depth, rho_t, None, True, value * self.root_volume, False), base


def kernel_tent_bound_scan(
    model: KernelModel,
    family: GridFamily,
    pairs: int = 200,
    seed: int = 0,
    depth_range: Optional[Tuple[float, float]] = None,
    neighbours: int = 16,
    scanner: Optional[KernelTentScanner] = None,
    mcneal_stein_pairs: int = 0,
) -> KernelTentReport:
    """Empirical A with |K(z, xi)| Vol(T^flow(Q)) <= A over random nearby pairs in the band."""
    scanner = scanner or KernelTentScanner(model, family, seed=seed)
    domain = family.domain
    sample = family.sample
    lo, hi = depth_range or (scanner.top * family.delta ** 3, scanner.top)
    rng = np.random.default_rng(seed)
    report = KernelTentReport()
    k = min(neighbours, len(sample))
    for p in range(pairs):
        i = int(rng.integers(len(sample)))
        _, near = sample.tree.query(sample.points[i], k=k)
        j = int(np.atleast_1d(near)[rng.integers(k)])
        depths = np.exp(rng.uniform(math.log(lo), math.log(hi), size=2))
        z = flow(domain, sample.points[i], depths[0], scanner.integrator)
        xi = flow(domain, sample.points[j], depths[1], scanner.integrator)
        try:
            row, base = scanner.pair(z, xi, tag=p)
        except (AccuracyError, ProjectionError) as exc:
            report.skipped.append((type(exc).__name__, f"pair {p}"))
            samples_discarded.labels(reason="kernel_pair").inc()
            continue
        report.rows.append(row)
        report.failures += int(not row.contained)
        report.rho_lower_ratio = min(report.rho_lower_ratio, row.rho / float(depths.sum()))
        if p < mcneal_stein_pairs and base is not None and not row.root and row.rho <= domain.nbhd_width / 2:
            frame = extremal_frame(domain, base, row.rho, seed + p, scanner.config)
            ms = mcneal_stein_volume(domain, frame, seed=seed + p)
            report.mcneal_stein_ratio.append(ms.value / scanner.volume(row.grid_index, row.level, row.index))
        logger.debug(f"Pair {p}: rho={row.rho:.3g}, level={row.level}, bound={row.bound:.4g}")

    logger.info(
        f"Kernel-tent scan: A={report.A:.4g} over {report.pairs} pairs, "
        f"containment failures {report.failures}, skipped {len(report.skipped)}"
    )
    return report
