"""Extremal bases, McNeal-Stein polydiscs and the boundary quasimetric."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Self

from dyadic_flow_tents.domain_model import (
    AMBIENT_BOX,
    DomainSpec,
    as_points,
    defining_function,
    gradient,
    hessian,
    samples_discarded,
    to_complex,
    to_real,
)
from dyadic_flow_tents.exceptions import BracketError, ConfigurationError, DomainInputError, ScaleRangeError

logger = logging.getLogger(__name__)

# slack used by every polydisc membership test (closed polydiscs)
MEMBERSHIP_SLACK = 1e-12


@dataclass
class TauConfig:
    """Resolution of the inner maximum and of the bisection in ``tau``."""

    angles: int = 64
    radial: int = 33
    tolerance: float = 1e-8
    refinement_threshold: float = 5e-3
    max_refinements: int = 3
    bracket_bound: float = 2.0 * AMBIENT_BOX
    starts: int = 32


@dataclass
class EpsLadder:
    """Geometric scale ladder ending exactly at ``cap`` (defaults to ``nbhd_width``)."""

    minimum: float = 1e-5
    ratio: float = 2.0 ** 0.125
    cap: Optional[float] = None

    def values(self, domain: DomainSpec) -> np.ndarray:
        cap = self.cap if self.cap is not None else domain.nbhd_width
        if not 0 < self.minimum < cap:
            raise ConfigurationError(f"Ladder minimum {self.minimum} must lie in (0, {cap})", "ladder")
        count = int(math.ceil(math.log(cap / self.minimum) / math.log(self.ratio))) + 1
        return cap * self.ratio ** (-np.arange(count)[::-1].astype(float))


def complex_normal(domain: DomainSpec, xi) -> np.ndarray:
    """Unit complex direction of the gradient line at ``xi``."""
    g = to_complex(gradient(domain, xi))
    return g / np.linalg.norm(g)


def _line_vectors(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return to_real(u), to_real(1j * u)


def _complement(columns: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the Hermitian orthogonal complement of ``columns``."""
    n, k = columns.shape
    q, _ = np.linalg.qr(np.hstack([columns, np.eye(n, dtype=complex)]))
    return q[:, k:]


def _slice_minimizer(domain: DomainSpec, xi: np.ndarray, d0: np.ndarray, d1: np.ndarray) -> Optional[complex]:
    """Minimizer of the convex slice ``lambda -> r(xi + lambda u)`` by damped Newton steps."""
    lam = np.zeros(2)
    for _ in range(40):
        p = xi + lam[0] * d0 + lam[1] * d1
        g = gradient(domain, p)
        H = hessian(domain, p)
        G = np.array([g @ d0, g @ d1])
        D = np.array([[d0 @ H @ d0, d0 @ H @ d1], [d1 @ H @ d0, d1 @ H @ d1]])
        if np.linalg.eigvalsh(D)[0] <= 1e-12:
            return None
        step = -np.linalg.solve(D, G)
        f0 = defining_function(domain, p)
        t = 1.0
        while t > 1e-6 and defining_function(domain, xi + (lam[0] + t * step[0]) * d0 + (lam[1] + t * step[1]) * d1) > f0:
            t *= 0.5
        lam = lam + t * step
        if np.linalg.norm(lam) > 1e3:
            return None
        if np.linalg.norm(t * step) <= 1e-13 * (1.0 + np.linalg.norm(lam)):
            break
    return complex(lam[0], lam[1])


def _circular_peak(g: np.ndarray) -> np.ndarray:
    """Row-wise maximum of periodic samples with parabolic interpolation around the argmax."""
    count = g.shape[1]
    rows = np.arange(g.shape[0])
    i = np.argmax(g, axis=1)
    y0 = g[rows, i]
    ym = g[rows, (i - 1) % count]
    yp = g[rows, (i + 1) % count]
    den = ym - 2.0 * y0 + yp
    concave = den < 0
    safe = np.where(concave, den, -1.0)
    offset = np.clip(0.5 * (ym - yp) / safe, -0.5, 0.5)
    return np.where(concave, y0 - 0.25 * (ym - yp) * offset, y0)


def _disk_deviation(
    domain: DomainSpec,
    xi: np.ndarray,
    d0: np.ndarray,
    d1: np.ndarray,
    radii: np.ndarray,
    lam_star: Optional[complex],
    angles: int,
    radial: int,
) -> np.ndarray:
    """max over |lambda| <= c of |r(xi + lambda u) - r(xi)| for every radius c."""
    r0 = defining_function(domain, xi)
    theta = 2.0 * np.pi * np.arange(angles) / angles
    circle = radii[:, None] * np.exp(1j * theta)[None, :]
    pts = xi + circle.real[..., None] * d0 + circle.imag[..., None] * d1
    g = defining_function(domain, pts) - r0
    upper = _circular_peak(g)
    lower = -_circular_peak(-g)

    if lam_star is not None:
        phase = np.full(radii.shape, np.angle(lam_star))
    else:
        phase = theta[np.argmin(g, axis=1)]
    s = np.linspace(0.0, 1.0, radial)
    seg = radii[:, None] * s[None, :] * np.exp(1j * phase)[:, None]
    seg_pts = xi + seg.real[..., None] * d0 + seg.imag[..., None] * d1
    lower = np.minimum(lower, (defining_function(domain, seg_pts) - r0).min(axis=1))

    if lam_star is not None:
        star = defining_function(domain, xi + lam_star.real * d0 + lam_star.imag * d1) - r0
        lower = np.where(abs(lam_star) <= radii, np.minimum(lower, star), lower)
    return np.maximum(upper, -lower)


def tau_batch(
    domain: DomainSpec,
    xi,
    u: np.ndarray,
    eps: np.ndarray,
    config: Optional[TauConfig] = None,
    angles: Optional[int] = None,
    radial: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ``tau`` over an array of scales at fixed resolution.

    Returns the radii and a mask of scales that could not be bracketed; those radii
    are set to the bracket bound.
    """
    config = config or TauConfig()
    angles = angles or config.angles
    radial = radial or config.radial
    xi = as_points(domain, xi)
    u = np.asarray(u, dtype=complex)
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    d0, d1 = _line_vectors(u)
    lam_star = _slice_minimizer(domain, xi, d0, d1)

    hi = np.full(eps.shape, config.bracket_bound)
    unbracketed = _disk_deviation(domain, xi, d0, d1, hi, lam_star, angles, radial) < eps
    lo = np.zeros(eps.shape)
    for _ in range(200):
        if np.all(hi - lo <= config.tolerance * hi):
            break
        mid = 0.5 * (lo + hi)
        above = _disk_deviation(domain, xi, d0, d1, mid, lam_star, angles, radial) >= eps
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    radii = 0.5 * (lo + hi)
    radii[unbracketed] = config.bracket_bound
    return radii, unbracketed


def _check_scale(domain: DomainSpec, eps: float) -> None:
    if not 0 < eps <= domain.nbhd_width / 2:
        raise ScaleRangeError(f"Scale {eps} outside (0, {domain.nbhd_width / 2}]")


def tau(domain: DomainSpec, xi, u, eps: float, config: Optional[TauConfig] = None) -> float:
    """Radius of the largest disk along ``u`` on which ``r`` moves by at most ``eps``."""
    config = config or TauConfig()
    _check_scale(domain, eps)
    u = np.asarray(u, dtype=complex)
    if abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise DomainInputError(f"Direction must be a unit vector, |u| = {np.linalg.norm(u)}")

    angles, radial = config.angles, config.radial
    radii, unbracketed = tau_batch(domain, xi, u, [eps], config, angles, radial)
    if unbracketed[0]:
        raise BracketError(f"Scale {eps} not reached within |lambda| <= {config.bracket_bound}", config.bracket_bound)
    value = float(radii[0])
    for _ in range(config.max_refinements):
        angles, radial = 2 * angles, 2 * radial - 1
        finer = float(tau_batch(domain, xi, u, [eps], config, angles, radial)[0][0])
        change = abs(finer - value) / finer
        value = finer
        if change < config.refinement_threshold:
            break
    else:
        logger.warning(f"tau did not settle after {config.max_refinements} refinements at eps={eps}")
    return value


@dataclass
class ExtremalFrame:
    """An eps-extremal basis at ``base_point``: columns of ``basis`` are u_1..u_n."""

    base_point: np.ndarray
    eps: float
    basis: np.ndarray
    radii: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def coordinates(self, z) -> np.ndarray:
        dz = to_complex(z) - to_complex(self.base_point)
        return dz @ self.basis.conj()

    def reconstruct(self, lam) -> np.ndarray:
        return to_real(to_complex(self.base_point) + np.asarray(lam, dtype=complex) @ self.basis.T)

    def to_document(self) -> Dict[str, Any]:
        return {
            "xi": self.base_point.tolist(),
            "eps": self.eps,
            "basis": [to_real(self.basis[:, k]).tolist() for k in range(self.basis.shape[1])],
            "radii": self.radii.tolist(),
        }

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> Self:
        basis = np.column_stack([to_complex(np.asarray(col)) for col in doc["basis"]])
        return cls(
            base_point=np.asarray(doc["xi"], dtype=float),
            eps=float(doc["eps"]),
            basis=basis,
            radii=np.asarray(doc["radii"], dtype=float),
        )


def polydisc_contains(frame: ExtremalFrame, z, dilation: float = 1.0) -> np.ndarray:
    """Membership in the dilated polydisc ``dilation * P_eps(xi)``."""
    lam = np.abs(frame.coordinates(z))
    bound = dilation * frame.radii * (1.0 + MEMBERSHIP_SLACK)
    inside = np.all(lam <= bound, axis=-1)
    return bool(inside) if np.ndim(inside) == 0 else inside


def _maximize_tau(
    domain: DomainSpec,
    xi: np.ndarray,
    eps: float,
    subspace: np.ndarray,
    rng: np.random.Generator,
    config: TauConfig,
) -> Tuple[np.ndarray, Optional[str]]:
    d = subspace.shape[1]

    def value(v: np.ndarray) -> float:
        u = subspace @ v
        u = u / np.linalg.norm(u)
        return float(tau_batch(domain, xi, u, [eps], config)[0][0])

    starts = [np.eye(d, dtype=complex)[:, i] for i in range(d)]
    for _ in range(config.starts):
        v = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        starts.append(v / np.linalg.norm(v))
    values = np.array([value(v) for v in starts])

    # ties resolve to the lowest index, coordinate vectors come first
    top = values.max()
    best = int(np.flatnonzero(values >= top * (1.0 - 1e-9))[0])
    rest = [i for i in np.argsort(-values, kind="stable") if i != best]
    candidates = [best] + rest[:1]

    refined = []
    for i in candidates:
        x = np.concatenate([starts[i].real, starts[i].imag])
        val = values[i]
        step = 0.25
        while step > 1e-4:
            improved = False
            for j in range(2 * d):
                for sign in (1.0, -1.0):
                    y = x.copy()
                    y[j] += sign * step
                    vy = value(y[:d] + 1j * y[d:])
                    if vy > val * (1.0 + 1e-12):
                        x, val, improved = y, vy, True
                        break
                if improved:
                    break
            if not improved:
                step *= 0.5
        v = x[:d] + 1j * x[d:]
        refined.append((val, v / np.linalg.norm(v)))

    warning = None
    if len(refined) > 1:
        a, b = refined[0][0], refined[1][0]
        if abs(a - b) > 0.01 * max(a, b):
            warning = f"Optimizer starts disagree: tau {a:.6g} vs {b:.6g} at eps={eps}"
            logger.warning(warning)
    val, v = max(refined, key=lambda item: item[0])
    u = subspace @ v
    return u / np.linalg.norm(u), warning


def extremal_directions(
    domain: DomainSpec,
    xi: np.ndarray,
    eps: float,
    rng: np.random.Generator,
    config: TauConfig,
) -> Tuple[np.ndarray, List[str]]:
    """The gradient line first, then successive tau maximizers in the orthogonal complements."""
    u1 = complex_normal(domain, xi)
    basis = [u1]
    warnings: List[str] = []
    sub = _complement(u1[:, None])
    while sub.shape[1] > 0:
        if sub.shape[1] == 1:
            u = sub[:, 0]
        else:
            u, warning = _maximize_tau(domain, xi, eps, sub, rng, config)
            if warning:
                warnings.append(warning)
        basis.append(u)
        coeff = sub.conj().T @ u
        sub = sub @ _complement(coeff[:, None])
    return np.column_stack(basis), warnings


def extremal_frame(
    domain: DomainSpec,
    xi,
    eps: float,
    seed: int = 0,
    config: Optional[TauConfig] = None,
) -> ExtremalFrame:
    config = config or TauConfig()
    xi = as_points(domain, xi)
    _check_scale(domain, eps)
    if abs(defining_function(domain, xi)) >= domain.nbhd_width:
        raise DomainInputError(f"Base point lies outside the band |r| < {domain.nbhd_width}")
    basis, warnings = extremal_directions(domain, xi, eps, np.random.default_rng(seed), config)
    radii = np.array([tau(domain, xi, basis[:, k], eps, config) for k in range(domain.n)])
    return ExtremalFrame(base_point=xi.copy(), eps=float(eps), basis=basis, radii=radii, warnings=warnings)


@dataclass
class FrameLadder:
    """Extremal frames at one base point over a whole scale ladder."""

    base_point: np.ndarray
    eps: np.ndarray
    bases: np.ndarray
    radii: np.ndarray
    shared_basis: bool

    def contained(self, points) -> np.ndarray:
        """Boolean (m, L) membership of each point in each rung's polydisc."""
        dz = np.atleast_2d(to_complex(points)) - to_complex(self.base_point)
        if self.shared_basis:
            lam = np.abs(dz @ self.bases[0].conj())[:, None, :]
        else:
            lam = np.abs(np.einsum("mj,ljk->mlk", dz, self.bases.conj()))
        bound = self.radii[None, :, :] * (1.0 + MEMBERSHIP_SLACK)
        return np.all(lam <= bound, axis=-1)

    def first_rung(self, points) -> np.ndarray:
        """Index of the first rung containing each point (the running OR); ``L`` if none."""
        inside = self.contained(points)
        first = np.argmax(inside, axis=1)
        return np.where(inside.any(axis=1), first, len(self.eps))


def frame_ladder(
    domain: DomainSpec,
    xi,
    eps: np.ndarray,
    seed: int = 0,
    config: Optional[TauConfig] = None,
) -> FrameLadder:
    config = config or TauConfig()
    xi = as_points(domain, xi)
    eps = np.asarray(eps, dtype=float)
    rng = np.random.default_rng(seed)
    if domain.n == 2:
        basis, _ = extremal_directions(domain, xi, float(eps[0]), rng, config)
        radii = np.empty((len(eps), domain.n))
        for k in range(domain.n):
            radii[:, k], unbracketed = tau_batch(domain, xi, basis[:, k], eps, config)
            if unbracketed.any():
                logger.warning(f"{int(unbracketed.sum())} ladder rungs not bracketed along u_{k + 1}")
        bases = basis[None, :, :]
        shared = True
    else:
        bases = np.empty((len(eps), domain.n, domain.n), dtype=complex)
        radii = np.empty((len(eps), domain.n))
        for j, e in enumerate(eps):
            basis, _ = extremal_directions(domain, xi, float(e), rng, config)
            bases[j] = basis
            for k in range(domain.n):
                radii[j, k] = tau_batch(domain, xi, basis[:, k], [e], config)[0][0]
        shared = False
    return FrameLadder(base_point=xi.copy(), eps=eps, bases=bases, radii=radii, shared_basis=shared)


@dataclass
class RhoValue:
    value: float
    at_cap: bool = False


def rho(
    domain: DomainSpec,
    z1,
    z2,
    ladder: Optional[EpsLadder] = None,
    config: Optional[TauConfig] = None,
    refine: bool = True,
) -> RhoValue:
    """Quasi-distance: least scale of mutual polydisc containment."""
    z1 = as_points(domain, z1)
    z2 = as_points(domain, z2)
    for z in (z1, z2):
        if abs(defining_function(domain, z)) >= 1e-9:
            raise DomainInputError("rho is defined between boundary points")
    if np.allclose(z1, z2, rtol=0.0, atol=1e-14):
        return RhoValue(0.0)
    config = config or TauConfig()
    ladder = ladder or EpsLadder()
    eps = ladder.values(domain)
    first = max(
        int(frame_ladder(domain, z1, eps, config=config).first_rung(z2)[0]),
        int(frame_ladder(domain, z2, eps, config=config).first_rung(z1)[0]),
    )
    if first >= len(eps):
        return RhoValue(float(eps[-1]), at_cap=True)
    if not refine or first == 0:
        return RhoValue(float(eps[first]))

    def mutual(e: float) -> bool:
        return bool(
            frame_ladder(domain, z1, [e], config=config).contained(z2)[0, 0]
            and frame_ladder(domain, z2, [e], config=config).contained(z1)[0, 0]
        )

    lo, hi = float(eps[first - 1]), float(eps[first])
    for _ in range(30):
        mid = math.sqrt(lo * hi)
        if mutual(mid):
            hi = mid
        else:
            lo = mid
    return RhoValue(hi)


class QuasimetricOracle:
    """Ladder-quantized quasi-distances between the points of a boundary sample.

    ``rho`` values are ladder rungs; pairs that are not mutually contained at the cap
    are reported as ``inf``.
    """

    def __init__(
        self,
        domain: DomainSpec,
        points: np.ndarray,
        ladder: Optional[EpsLadder] = None,
        config: Optional[TauConfig] = None,
        seed: int = 0,
    ):
        self.domain = domain
        self.points = np.atleast_2d(as_points(domain, points))
        self.ladder = ladder or EpsLadder()
        self.config = config or TauConfig()
        self.seed = seed
        self.eps = self.ladder.values(domain)
        self._frames: List[Optional[FrameLadder]] = [None] * len(self.points)
        self._rungs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def cap(self) -> float:
        return float(self.eps[-1])

    def frame(self, i: int) -> FrameLadder:
        if self._frames[i] is None:
            self._frames[i] = frame_ladder(self.domain, self.points[i], self.eps, self.seed + i, self.config)
        return self._frames[i]

    def precompute(self, workers: int = 1) -> None:
        missing = [i for i, f in enumerate(self._frames) if f is None]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for i, frame in zip(missing, pool.map(self.frame, missing)):
                    self._frames[i] = frame
        else:
            for i in missing:
                self.frame(i)
        logger.info(f"Built {len(missing)} frame ladders over {len(self.eps)} rungs")

    def rung_matrix(self) -> np.ndarray:
        """``R[i, j]`` is the rung index of rho(i, j); ``L`` marks pairs beyond the cap."""
        if self._rungs is None:
            size = len(self.points)
            dtype = np.int16 if len(self.eps) < 2 ** 15 else np.int32
            half = np.empty((size, size), dtype=dtype)
            for i in range(size):
                half[i] = self.frame(i).first_rung(self.points)
            rungs = np.maximum(half, half.T)
            same = np.all(self.points[:, None, :] == self.points[None, :, :], axis=-1)
            rungs[same] = -1
            self._rungs = rungs
        return self._rungs

    def _values(self, rungs: np.ndarray) -> np.ndarray:
        table = np.concatenate([self.eps, [np.inf]])
        out = table[np.clip(rungs, 0, len(self.eps))]
        return np.where(rungs < 0, 0.0, out)

    def rho_matrix(self) -> np.ndarray:
        return self._values(self.rung_matrix())

    def rho_row(self, i: int) -> np.ndarray:
        return self._values(self.rung_matrix()[i])

    def pair(self, i: int, j: int) -> float:
        return float(self._values(self.rung_matrix()[i, j]))

    def rho_from_point(self, xi) -> np.ndarray:
        """Quasi-distances from an arbitrary boundary point to every sample point."""
        xi = as_points(self.domain, xi)
        ladder = frame_ladder(self.domain, xi, self.eps, self.seed, self.config)
        outgoing = ladder.first_rung(self.points)
        incoming = np.array([self.frame(i).first_rung(xi)[0] for i in range(len(self.points))])
        rungs = np.maximum(outgoing, incoming)
        rungs = np.where(np.all(self.points == xi, axis=1), -1, rungs)
        return self._values(rungs)


@dataclass
class QuasimetricParams:
    kappa: float
    doubling_K: float
    per_scale_K: Dict[float, float] = field(default_factory=dict)
    triples_used: int = 0
    skipped: List[Tuple[str, int]] = field(default_factory=list)


def estimate_structure_constants(
    domain: DomainSpec,
    boundary_points: np.ndarray,
    triples: int = 10_000,
    seed: int = 0,
    oracle: Optional[QuasimetricOracle] = None,
    weights: Optional[np.ndarray] = None,
    scales: Optional[Sequence[float]] = None,
    centers: int = 200,
) -> QuasimetricParams:
    """Empirical quasi-triangle constant and doubling constant on a point set."""
    points = np.atleast_2d(as_points(domain, boundary_points))
    if len(points) < 200:
        raise ConfigurationError(f"Need at least 200 boundary points, got {len(points)}", "boundary_points")
    oracle = oracle or QuasimetricOracle(domain, points, seed=seed)
    R = oracle.rho_matrix()
    rng = np.random.default_rng(seed)

    idx = rng.integers(0, len(points), size=(triples, 3))
    a = R[idx[:, 0], idx[:, 1]]
    b = R[idx[:, 0], idx[:, 2]]
    c = R[idx[:, 1], idx[:, 2]]
    finite = np.isfinite(a) & np.isfinite(b) & np.isfinite(c)
    degenerate = finite & (b + c < 1e-12)
    used = finite & ~degenerate
    skipped = []
    if np.any(~finite):
        skipped.append(("at_cap", int(np.count_nonzero(~finite))))
    if np.any(degenerate):
        skipped.append(("degenerate", int(np.count_nonzero(degenerate))))
    for reason, count in skipped:
        samples_discarded.labels(reason=reason).inc(count)
    kappa = 1.0
    if np.any(used):
        kappa = max(1.0, float(np.max(a[used] / (b[used] + c[used]))))

    w = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)
    if scales is None:
        scales = [2.0 ** -k for k in range(3, 9) if 2.0 ** (1 - k) <= oracle.cap]
    chosen = rng.choice(len(points), size=min(centers, len(points)), replace=False)
    per_scale = {}
    for e in scales:
        rows = R[chosen]
        inner = (rows < e) @ w
        outer = (rows < 2 * e) @ w
        per_scale[float(e)] = float(np.max(outer / inner))
    doubling = max([1.0] + list(per_scale.values()))
    logger.info(f"Structure constants: kappa={kappa:.4g}, K={doubling:.4g} over {int(used.sum())} triples")
    return QuasimetricParams(
        kappa=kappa,
        doubling_K=doubling,
        per_scale_K=per_scale,
        triples_used=int(used.sum()),
        skipped=skipped,
    )
