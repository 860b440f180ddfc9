"""Model domains in C^n and their scaled defining functions.

Points are real arrays of length 2n with real and imaginary parts interleaved,
``(x1, y1, x2, y2, ...)``. Every jet function accepts a single point or a stack of
points along the leading axes.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from prometheus_client import Counter
from typing_extensions import Self

from dyadic_flow_tents.exceptions import ConfigurationError, DiagnosticError, DomainInputError

logger = logging.getLogger(__name__)

DOMAIN_KINDS = ("ball", "ellipsoid", "halfspace")
MAX_EXPONENT = 4
AMBIENT_BOX = 2.0

samples_discarded = Counter(
    "dyadic_samples_discarded",
    "Samples dropped by estimators, by reason code",
    ["reason"],
)


@dataclass(frozen=True)
class DomainSpec:
    """Immutable description of a model domain.

    :param kind: ``ball``, ``ellipsoid`` or the ``halfspace`` fixture ``r = x1``.
    :param n: complex dimension.
    :param exponents: ellipsoid exponents ``m_j`` of ``sum |z_j|^(2 m_j) < 1``.
    :param nbhd_width: half width of the band ``U = {|r| < nbhd_width}``.
    :param c_omega: distance comparability constant, when already estimated.
    """

    kind: str
    n: int
    exponents: Tuple[int, ...] = ()
    nbhd_width: float = 0.1
    c_omega: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise DomainInputError(f"Unknown domain kind {self.kind!r}; expected one of {DOMAIN_KINDS}")
        if int(self.n) != self.n or self.n < 2:
            raise DomainInputError(f"Complex dimension must be an integer >= 2, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        exponents = tuple(int(m) for m in self.exponents)
        if self.kind == "ellipsoid":
            if len(exponents) != self.n:
                raise DomainInputError(f"Ellipsoid needs {self.n} exponents, got {len(exponents)}")
            if any(m < 1 or m > MAX_EXPONENT for m in exponents):
                raise DomainInputError(f"Ellipsoid exponents must lie in [1, {MAX_EXPONENT}], got {exponents}")
        elif exponents and any(m != 1 for m in exponents):
            raise DomainInputError(f"Exponents are only meaningful for ellipsoids, got {exponents}")
        else:
            exponents = ()
        object.__setattr__(self, "exponents", exponents)
        if not self.nbhd_width > 0:
            raise DomainInputError(f"nbhd_width must be positive, got {self.nbhd_width}")
        object.__setattr__(self, "nbhd_width", float(self.nbhd_width))

    @property
    def dim(self) -> int:
        return 2 * self.n

    @property
    def powers(self) -> np.ndarray:
        if self.kind == "ellipsoid":
            return np.asarray(self.exponents, dtype=int)
        return np.ones(self.n, dtype=int)

    @property
    def type_M(self) -> int:
        return 2 * int(self.powers.max())

    @property
    def scale(self) -> float:
        # unit gradient at the reference boundary point (1, 0, ..., 0)
        if self.kind == "halfspace":
            return 1.0
        return 2.0 * float(self.powers[0])

    @property
    def flow_band(self) -> float:
        """Flow existence time t0."""
        return self.nbhd_width / 2.0

    @property
    def bounded(self) -> bool:
        return self.kind != "halfspace"

    def with_c_omega(self, value: float) -> Self:
        return replace(self, c_omega=float(value))

    def to_document(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"kind": self.kind, "n": self.n, "nbhd_width": self.nbhd_width}
        if self.kind == "ellipsoid":
            doc["exponents"] = list(self.exponents)
        if self.c_omega is not None:
            doc["c_omega"] = self.c_omega
        return doc

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> Self:
        if not isinstance(doc, dict):
            raise DomainInputError("Domain document must be a JSON object")
        unknown = set(doc) - {"kind", "n", "exponents", "nbhd_width", "c_omega"}
        if unknown:
            raise DomainInputError(f"Unknown keys in domain document: {sorted(unknown)}")
        try:
            return cls(
                kind=doc["kind"],
                n=doc["n"],
                exponents=tuple(doc.get("exponents", ())),
                nbhd_width=doc.get("nbhd_width", 0.1),
                c_omega=doc.get("c_omega"),
            )
        except KeyError as e:
            raise DomainInputError(f"Domain document is missing {e}") from e
        except TypeError as e:
            raise DomainInputError(f"Malformed domain document: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> Self:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DomainInputError(f"Cannot read domain document {path}: {e}") from e
        return cls.from_document(doc)

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=2, sort_keys=True))

    def digest(self) -> str:
        doc = {k: v for k, v in self.to_document().items() if k != "c_omega"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Jet2:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def as_points(domain: DomainSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] != domain.dim:
        raise DomainInputError(f"Expected points with {domain.dim} real coordinates, got shape {z.shape}")
    return z


def to_complex(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return z[..., 0::2] + 1j * z[..., 1::2]


def to_real(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=complex)
    out = np.empty(w.shape[:-1] + (2 * w.shape[-1],), dtype=float)
    out[..., 0::2] = w.real
    out[..., 1::2] = w.imag
    return out


def defining_function(domain: DomainSpec, z) -> np.ndarray:
    z = as_points(domain, z)
    if domain.kind == "halfspace":
        return np.array(z[..., 0], dtype=float)
    rho = z[..., 0::2] ** 2 + z[..., 1::2] ** 2
    raw = np.sum(rho ** domain.powers, axis=-1) - 1.0
    return raw / domain.scale


def gradient(domain: DomainSpec, z) -> np.ndarray:
    z = as_points(domain, z)
    g = np.zeros_like(z)
    if domain.kind == "halfspace":
        g[..., 0] = 1.0
        return g
    m = domain.powers
    x, y = z[..., 0::2], z[..., 1::2]
    coef = 2.0 * m * (x * x + y * y) ** (m - 1)
    g[..., 0::2] = coef * x
    g[..., 1::2] = coef * y
    return g / domain.scale


def hessian(domain: DomainSpec, z) -> np.ndarray:
    z = as_points(domain, z)
    H = np.zeros(z.shape + (domain.dim,))
    if domain.kind == "halfspace":
        return H
    for j, m in enumerate(domain.powers):
        x, y = z[..., 2 * j], z[..., 2 * j + 1]
        rho = x * x + y * y
        a = 2.0 * m * rho ** (m - 1)
        b = 4.0 * m * (m - 1) * rho ** (m - 2) if m >= 2 else np.zeros_like(rho)
        H[..., 2 * j, 2 * j] = a + b * x * x
        H[..., 2 * j + 1, 2 * j + 1] = a + b * y * y
        H[..., 2 * j, 2 * j + 1] = b * x * y
        H[..., 2 * j + 1, 2 * j] = b * x * y
    return H / domain.scale


def eval_jet(domain: DomainSpec, z) -> Jet2:
    z = as_points(domain, z)
    if z.ndim != 1:
        raise DomainInputError(f"eval_jet takes a single point, got shape {z.shape}")
    return Jet2(
        value=float(defining_function(domain, z)),
        gradient=gradient(domain, z),
        hessian=hessian(domain, z),
    )


def unit_normal(domain: DomainSpec, z) -> np.ndarray:
    g = gradient(domain, z)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def boundary_radius(domain: DomainSpec, directions: np.ndarray, iterations: int = 80) -> np.ndarray:
    """Radii ``s`` with ``r(s * u) = 0`` for unit directions ``u`` (rays from the origin)."""
    if not domain.bounded:
        raise DomainInputError("Rays from the origin do not meet the boundary of an unbounded domain")
    u = np.atleast_2d(directions)
    if domain.kind == "ball":
        return 1.0 / np.linalg.norm(u, axis=-1)
    lo = np.zeros(u.shape[0])
    hi = np.full(u.shape[0], 2.0 * AMBIENT_BOX)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        inside = defining_function(domain, mid[:, None] * u) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


def ray_project(domain: DomainSpec, z) -> np.ndarray:
    """Radial projection onto the boundary (drops x1 for the half-space)."""
    z = np.atleast_2d(as_points(domain, z))
    if domain.kind == "halfspace":
        out = z.copy()
        out[:, 0] = 0.0
        return out
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    u = z / norms
    return boundary_radius(domain, u)[:, None] * u


def sample_band(
    domain: DomainSpec,
    count: int,
    rng: np.random.Generator,
    lower: Optional[float] = None,
    upper: float = 0.0,
) -> np.ndarray:
    """Points with ``r`` uniformly distributed in ``(lower, upper)``."""
    if lower is None:
        lower = -domain.nbhd_width
    targets = rng.uniform(lower, upper, size=count)
    if domain.kind == "halfspace":
        z = rng.uniform(-1.0, 1.0, size=(count, domain.dim))
        z[:, 0] = targets
        return z
    targets = np.maximum(targets, -0.9 / domain.scale)
    u = rng.standard_normal((count, domain.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    lo = np.zeros(count)
    hi = np.full(count, 2.0 * AMBIENT_BOX)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = defining_function(domain, mid[:, None] * u) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return (0.5 * (lo + hi))[:, None] * u


def estimate_c_omega(domain: DomainSpec, samples: int = 200, seed: int = 0) -> float:
    """Empirical supremum of ``max(dist/|r|, |r|/dist)`` over band points inside the domain.

    The domain is frozen; callers keep the value with :meth:`DomainSpec.with_c_omega`.
    """
    from dyadic_flow_tents.flow_tents import nearest_project_many

    if samples < 100:
        raise ConfigurationError(f"estimate_c_omega needs at least 100 samples, got {samples}", "samples")
    rng = np.random.default_rng(seed)
    z = sample_band(domain, samples, rng, lower=-domain.nbhd_width, upper=-1e-6 * domain.nbhd_width)
    w, converged = nearest_project_many(domain, z)
    discarded = int(np.count_nonzero(~converged))
    if discarded:
        samples_discarded.labels(reason="projection_failed").inc(discarded)
        logger.warning(f"Discarded {discarded}/{samples} samples whose nearest point projection failed")
    if discarded > 0.1 * samples:
        raise DiagnosticError(f"{discarded} of {samples} projections failed while estimating C_Omega")
    dist = np.linalg.norm(z[converged] - w[converged], axis=1)
    depth = np.abs(defining_function(domain, z[converged]))
    ratio = np.maximum(dist / depth, depth / dist)
    value = float(ratio.max())
    logger.info(f"Estimated C_Omega = {value:.6g} for {domain.kind} from {samples} samples")
    return value


@dataclass
class ConvexityReport:
    min_eigenvalue: float
    samples: int
    passed: bool


def convexity_check(domain: DomainSpec, samples: int = 200, seed: int = 0) -> ConvexityReport:
    rng = np.random.default_rng(seed)
    z = sample_band(domain, samples, rng, lower=-domain.nbhd_width, upper=domain.nbhd_width)
    eig = np.linalg.eigvalsh(hessian(domain, z))
    lowest = float(eig.min())
    return ConvexityReport(min_eigenvalue=lowest, samples=samples, passed=lowest >= -1e-9)


@dataclass
class DomainCheckReport:
    """Residuals gathered by :func:`check_domain`."""

    domain: Dict[str, Any]
    samples: int
    seed: int
    gradient_residual: float
    hessian_residual: float
    convexity: ConvexityReport
    grad_norm_band: Tuple[float, float]
    grad_norm_boundary: Tuple[float, float]
    sign_invariant: bool
    warnings: list = field(default_factory=list)

    @property
    def normalized(self) -> bool:
        """2/3 <= |grad r| <= 3/2 on the sampled boundary points."""
        lo, hi = self.grad_norm_boundary
        return lo >= 2.0 / 3.0 and hi <= 1.5

    @property
    def band_normalized(self) -> bool:
        lo, hi = self.grad_norm_band
        return lo >= 2.0 / 3.0 and hi <= 1.5

    @property
    def passed(self) -> bool:
        return (
            self.gradient_residual <= 1e-6
            and self.hessian_residual <= 1e-6
            and self.convexity.passed
            and self.sign_invariant
            and self.normalized
        )

    def to_document(self) -> Dict[str, Any]:
        return {
            "domain": self.domain,
            "samples": self.samples,
            "seed": self.seed,
            "gradient_residual": self.gradient_residual,
            "hessian_residual": self.hessian_residual,
            "min_hessian_eigenvalue": self.convexity.min_eigenvalue,
            "grad_norm_band": list(self.grad_norm_band),
            "grad_norm_boundary": list(self.grad_norm_boundary),
            "normalized": self.normalized,
            "band_normalized": self.band_normalized,
            "sign_invariant": self.sign_invariant,
            "warnings": list(self.warnings),
            "passed": self.passed,
        }


def finite_difference_residuals(domain: DomainSpec, z: np.ndarray, step: float = 1e-5) -> Tuple[float, float]:
    """Worst relative mismatch of analytic gradient/Hessian against central differences."""
    grad_err = 0.0
    hess_err = 0.0
    eye = np.eye(domain.dim) * step
    for point in np.atleast_2d(z):
        plus, minus = point + eye, point - eye
        fd_grad = (defining_function(domain, plus) - defining_function(domain, minus)) / (2 * step)
        fd_hess = (gradient(domain, plus) - gradient(domain, minus)) / (2 * step)
        g = gradient(domain, point)
        H = hessian(domain, point)
        grad_err = max(grad_err, np.linalg.norm(fd_grad - g) / max(np.linalg.norm(g), 1.0))
        hess_err = max(hess_err, np.linalg.norm(fd_hess - H) / max(np.linalg.norm(H), 1.0))
    return float(grad_err), float(hess_err)


def check_domain(domain: DomainSpec, samples: int = 100, seed: int = 0) -> DomainCheckReport:
    rng = np.random.default_rng(seed)
    band = sample_band(domain, samples, rng, lower=-domain.nbhd_width, upper=domain.nbhd_width)
    grad_err, hess_err = finite_difference_residuals(domain, band)
    convexity = convexity_check(domain, samples, seed)
    band_norms = np.linalg.norm(gradient(domain, band), axis=1)

    if domain.bounded:
        u = rng.standard_normal((samples, domain.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        boundary = boundary_radius(domain, u)[:, None] * u
    else:
        boundary = ray_project(domain, band)
    boundary_norms = np.linalg.norm(gradient(domain, boundary), axis=1)

    raw = defining_function(domain, band) * domain.scale
    sign_invariant = bool(np.all(np.sign(raw) == np.sign(defining_function(domain, band))))

    report = DomainCheckReport(
        domain=domain.to_document(),
        samples=samples,
        seed=seed,
        gradient_residual=grad_err,
        hessian_residual=hess_err,
        convexity=convexity,
        grad_norm_band=(float(band_norms.min()), float(band_norms.max())),
        grad_norm_boundary=(float(boundary_norms.min()), float(boundary_norms.max())),
        sign_invariant=sign_invariant,
    )
    for where, (lo, hi), ok in (
        ("boundary", report.grad_norm_boundary, report.normalized),
        ("band", report.grad_norm_band, report.band_normalized),
    ):
        if not ok:
            report.warnings.append(f"|grad r| ranges over [{lo:.4g}, {hi:.4g}] on the {where}, outside [2/3, 3/2]")
            logger.warning(report.warnings[-1])
    logger.info(f"Domain check for {domain.kind}: passed={report.passed}")
    return report
