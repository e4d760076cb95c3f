import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, special

from nodal_lab.config import Settings, get_settings
from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import DegenerateConditioning, ModelError
from nodal_lab.geometry import (
    MAX_SPHERE_LEVEL,
    Domain,
    GridChart,
    boundary_quadrature,
    exp_map,
    geodesic_distance,
    quadrature,
    rechart,
    tangent_frames,
)
from nodal_lab.logger import logger
from nodal_lab.schemas import DivergenceReport, KacRiceReport
from nodal_lab.tasks import pair_rng, row_blocks, run_ordered

PAIR_BLOCK = 64
# floats drawn per vectorised Monte Carlo batch
SAMPLE_BLOCK = 2_000_000
RADIAL_NODES = 24
SHELL_NODES = 8
POLAR_DIRECTIONS_2D = 32
POLAR_DIRECTIONS_3D = 96


# ---------------------------------------------------------------------------
# Gaussian vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianVector:
    """
    Finite Gaussian law with optional mean. `pinned` marks coordinates
    already fixed by conditioning; conditioning on them again is a no-op.
    """

    covariance: np.ndarray
    mean: Optional[np.ndarray] = None
    labels: tuple[str, ...] = ()
    pinned: Optional[np.ndarray] = None

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))
        d = len(cov)
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(d))
        if self.pinned is None:
            object.__setattr__(self, "pinned", np.zeros(d, dtype=bool))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"x{i}" for i in range(d)))

    @property
    def dimension(self) -> int:
        return len(self.covariance)

    @property
    def scale(self) -> float:
        return max(float(np.max(np.abs(np.diag(self.covariance)))), 1e-300)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def condition(
        self,
        observed: Sequence[int],
        values: Optional[Sequence[float]] = None,
        settings: Optional[Settings] = None,
    ) -> "GaussianVector":
        return condition(self, observed, values, settings)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draws through the eigendecomposition, clamping roundoff negatives."""
        settings = get_settings()
        eigvals, eigvecs = np.linalg.eigh(self.covariance)
        if eigvals.min() < -settings.eigen_fail * self.scale:
            raise DegenerateConditioning(
                f"covariance has eigenvalue {eigvals.min():.3e}",
                "kacrice",
                "condition",
            )
        root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        return self.mean + rng.standard_normal((n, self.dimension)) @ root.T


def condition(
    joint: GaussianVector,
    observed: Sequence[int],
    values: Optional[Sequence[float]] = None,
    settings: Optional[Settings] = None,
) -> GaussianVector:
    """Gaussian regression of the joint law on the observed coordinates."""
    settings = settings or get_settings()
    observed = np.asarray(observed, dtype=np.int64)
    values = np.zeros(len(observed)) if values is None else np.asarray(values, float)
    fresh = ~joint.pinned[observed]
    obs, vals = observed[fresh], values[fresh]
    if len(obs) == 0:
        return joint

    cov = joint.covariance
    block = cov[np.ix_(obs, obs)]
    scale = joint.scale
    if np.linalg.eigvalsh(block).min() <= settings.conditioning_eps * scale:
        raise DegenerateConditioning(
            f"observed block {list(obs)} is numerically singular",
            "kacrice",
            "condition",
        )
    cross = cov[:, obs]
    gain = linalg.cho_solve(linalg.cho_factor(block), cross.T).T
    mean = joint.mean + gain @ (vals - joint.mean[obs])
    conditional = cov - gain @ cross.T
    conditional[obs, :] = 0.0
    conditional[:, obs] = 0.0
    mean[obs] = vals

    eigvals = np.linalg.eigvalsh(0.5 * (conditional + conditional.T))
    if eigvals.min() < -settings.eigen_fail * scale:
        raise DegenerateConditioning(
            f"conditional covariance has eigenvalue {eigvals.min():.3e}",
            "kacrice",
            "condition",
        )
    pinned = joint.pinned.copy()
    pinned[obs] = True
    return GaussianVector(conditional, mean, joint.labels, pinned)


# ---------------------------------------------------------------------------
# Jet rows of the finite-rank representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JetRows:
    """
    Rows of the linear map from basis coefficients to the jet at each point,
    in orthonormal tangent coordinates: value (N,R), gradient (N,m,R) and
    upper-triangular Hessian entries (N,k,R).
    """

    value: np.ndarray
    gradient: np.ndarray
    hessian: Optional[np.ndarray] = None


def jet_rows(
    model: CovarianceModel, points: np.ndarray, with_hessian: bool = False
) -> JetRows:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values, grads, hess = model.intrinsic_basis_jet(points)
    frames = tangent_frames(model.domain, points)
    gradient = np.einsum("nrd,ndi->nir", grads, frames)
    if not with_hessian:
        return JetRows(values, gradient)
    m = frames.shape[2]
    iu = np.triu_indices(m)
    full = np.einsum("nrde,ndi,nej->nijr", hess, frames, frames, optimize=True)
    return JetRows(values, gradient, full[:, iu[0], iu[1], :])


def _pair_matrix(
    model: CovarianceModel,
    p: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    with_hessian: bool,
) -> np.ndarray:
    """
    (B, F, R) rows [X(p), Y, grad X(p), grad X(q), (Hess X(p), Hess X(q))]
    with Y = (X(q) - X(p)) / r, which spans the same events as X(q) = 0.
    """
    jp = jet_rows(model, p, with_hessian)
    jq = jet_rows(model, q, with_hessian)
    y = (jq.value - jp.value) / r[:, None]
    parts = [jp.value[:, None, :], y[:, None, :], jp.gradient, jq.gradient]
    if with_hessian:
        parts += [jp.hessian, jq.hessian]
    return np.concatenate(parts, axis=1)


def _regress_rows(
    rows: np.ndarray, settings: Settings
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Conditions rows[:, 2:] on rows[:, :2] = 0 in square-root form: the
    residual rows R satisfy Cov = R R^T exactly, so samples are R z with z
    standard normal. Also returns the observed Gram matrices and their
    smallest relative eigenvalue.
    """
    obs = rows[:, :2, :]
    rest = rows[:, 2:, :]
    gram = np.einsum("bir,bjr->bij", obs, obs)
    a, b, c = gram[:, 0, 0], gram[:, 0, 1], gram[:, 1, 1]
    det = a * c - b * b
    trace = a + c
    min_eig = det / np.maximum(0.5 * trace + np.sqrt(0.25 * (a - c) ** 2 + b * b), 1e-300)
    relative = min_eig / np.maximum(trace, 1e-300)
    inv = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2) / det[:, None, None]
    cross = np.einsum("bir,bjr->bij", rest, obs)
    residual = rest - np.einsum("bij,bjk,bkr->bir", cross, inv, obs)
    return residual, gram, relative


def _expected_functional(
    residual: np.ndarray,
    functional: Callable[[np.ndarray], np.ndarray],
    seed: int,
    offset: int,
    n_samples: int,
) -> np.ndarray:
    out = np.empty(len(residual))
    for i, rows in enumerate(residual):
        z = pair_rng(seed, offset + i).standard_normal((n_samples, rows.shape[1]))
        out[i] = float(np.mean(functional(z @ rows.T)))
    return out


def _split(samples: np.ndarray, m: int, with_hessian: bool):
    gp = samples[:, :m]
    gq = samples[:, m : 2 * m]
    if not with_hessian:
        return gp, gq, None, None
    k = m * (m + 1) // 2
    return gp, gq, samples[:, 2 * m : 2 * m + k], samples[:, 2 * m + k : 2 * m + 2 * k]


def _symmetric(upper: np.ndarray, m: int) -> np.ndarray:
    iu = np.triu_indices(m)
    out = np.zeros(upper.shape[:-1] + (m, m))
    out[..., iu[0], iu[1]] = upper
    out[..., iu[1], iu[0]] = upper
    return out


def _curvature(grad: np.ndarray, hess_upper: np.ndarray, m: int) -> np.ndarray:
    """tilde-Laplacian / |grad| = (tr H - H(nu,nu)) / |grad|."""
    hess = _symmetric(hess_upper, m)
    norm = np.linalg.norm(grad, axis=-1)
    nu = grad / norm[..., None]
    tilde = np.trace(hess, axis1=-2, axis2=-1) - np.einsum("si,sij,sj->s", nu, hess, nu)
    return tilde / norm


def volume_functional(m: int) -> Callable[[np.ndarray], np.ndarray]:
    def functional(samples):
        gp, gq, _, _ = _split(samples, m, False)
        return np.linalg.norm(gp, axis=1) * np.linalg.norm(gq, axis=1)

    return functional


def derivative_functional(m: int) -> Callable[[np.ndarray], np.ndarray]:
    def functional(samples):
        gp, gq, hp, hq = _split(samples, m, True)
        return _curvature(gp, hp, m) * _curvature(gq, hq, m)

    return functional


# ---------------------------------------------------------------------------
# Two-point intensity
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwoPointIntensity:
    p: np.ndarray
    q: np.ndarray
    density_factor: float
    conditional: GaussianVector
    excluded: bool
    effective_distance: float


def _separation(domain: Domain, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.atleast_1d(geodesic_distance(domain, p, q))


def _gradient_scale(rows: JetRows) -> np.ndarray:
    """Mean directional gradient variance relative to the point variance."""
    m = rows.gradient.shape[1]
    grad = np.sum(rows.gradient**2, axis=(1, 2)) / m
    return grad / np.sum(rows.value**2, axis=1)


def effective_distance(
    model: CovarianceModel, p: np.ndarray, q: np.ndarray
) -> np.ndarray:
    """
    sqrt(1 - rho(p,q)^2) / sqrt(lambda): equals the geodesic distance to
    first order near the diagonal and vanishes on fully correlated pairs.
    """
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    jp, jq = jet_rows(model, p), jet_rows(model, q)
    vp, vq = jp.value, jq.value
    cpp, cqq = np.sum(vp**2, axis=1), np.sum(vq**2, axis=1)
    cpq = np.sum(vp * vq, axis=1)
    one_minus = np.clip(1.0 - cpq**2 / (cpp * cqq), 0.0, None)
    lam = 0.5 * (_gradient_scale(jp) + _gradient_scale(jq))
    return np.sqrt(one_minus / lam)


def two_point_density(
    model: CovarianceModel,
    p: np.ndarray,
    q: np.ndarray,
    delta: Optional[float] = None,
    settings: Optional[Settings] = None,
) -> TwoPointIntensity:
    settings = settings or get_settings()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    r = _separation(model.domain, p, q)
    if not r[0] > 0:
        raise DegenerateConditioning("p and q coincide", "kacrice", "two_point_density")
    rows = _pair_matrix(model, p[None], q[None], r, with_hessian=True)[0]
    gram = rows[:2] @ rows[:2].T
    det_xy = float(np.linalg.det(gram))
    eff = float(effective_distance(model, p, q)[0])
    m = model.domain.dims
    k = m * (m + 1) // 2
    labels = ("X(p)", "Y", *[f"dX(p)_{i}" for i in range(m)], *[f"dX(q)_{i}" for i in range(m)])
    labels += tuple(f"H(p)_{i}" for i in range(k)) + tuple(f"H(q)_{i}" for i in range(k))
    joint = GaussianVector(rows @ rows.T, labels=labels)
    conditional = condition(joint, [0, 1], settings=settings)
    density = 1.0 / (2.0 * math.pi * float(r[0]) * math.sqrt(det_xy))
    excluded = delta is not None and (float(r[0]) < delta or eff < delta)
    return TwoPointIntensity(p, q, density, conditional, excluded, eff)


# ---------------------------------------------------------------------------
# Quadrature plans
# ---------------------------------------------------------------------------


def quadrature_chart(domain: Domain, resolution: int) -> tuple[Domain, GridChart]:
    """Flat domains: `resolution` cells per axis. Sphere: a comparable mesh level."""
    if domain.is_sphere:
        level = int(np.clip(int(math.log2(max(resolution, 2))) - 1, 1, MAX_SPHERE_LEVEL - 1))
        return rechart(domain, level)
    return rechart(domain, resolution)


def _bump(t: np.ndarray) -> np.ndarray:
    """Smooth cutoff: 1 for t <= 1/2, 0 for t >= 1."""
    t = np.asarray(t, dtype=float)
    u = np.clip(2.0 * (1.0 - t), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def _directions(domain: Domain) -> tuple[np.ndarray, float]:
    if domain.dims == 2:
        theta = 2.0 * math.pi * (np.arange(POLAR_DIRECTIONS_2D) + 0.5) / POLAR_DIRECTIONS_2D
        return np.stack([np.cos(theta), np.sin(theta)], axis=1), 2.0 * math.pi / POLAR_DIRECTIONS_2D
    n = POLAR_DIRECTIONS_3D
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z**2)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1), 4.0 * math.pi / n


def _radial(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


@dataclass
class PairPlan:
    """
    Quadrature for a double integral over M x M reduced to one anchor.
    Each node q carries a weight (the anchor integral folded in) and a
    shell: 0 outside delta, 1 in [delta/2, delta), 2 in [delta/4, delta/2).
    """

    anchor: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    shells: np.ndarray
    delta: float
    excised: int = 0
    centres: int = 0
    notes: list[str] = field(default_factory=list)


def _pair_weight(domain: Domain, anchor: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Measure of {p : (p, p + s) in M x M} for lag s = q - anchor."""
    if domain.is_sphere:
        return np.full(len(q), 4.0 * math.pi)
    if domain.is_periodic:
        return np.full(len(q), domain.volume)
    lag = np.abs(q - anchor)
    return np.prod(np.clip(np.asarray(domain.extents) - lag, 0.0, None), axis=1)


def _polar_nodes(
    domain: Domain, centre: np.ndarray, a: float, b: float, n_radial: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points, measure weights and radii of a polar shell a <= r < b."""
    radii, rw = _radial(a, b, n_radial)
    dirs, dw = _directions(domain)
    if domain.is_sphere:
        frame = tangent_frames(domain, centre[None])[0]
        tangents = dirs @ frame.T
        rr = np.repeat(radii, len(dirs))
        tt = np.tile(tangents, (len(radii), 1))
        points = np.cos(rr)[:, None] * centre + np.sin(rr)[:, None] * tt
        weights = np.repeat(rw * np.sin(radii), len(dirs)) * dw
        return points, weights, rr
    rr = np.repeat(radii, len(dirs))
    points = centre + rr[:, None] * np.tile(dirs, (len(radii), 1))
    weights = np.repeat(rw * radii ** (domain.dims - 1), len(dirs)) * dw
    return points, weights, rr


def pair_plan(
    model: CovarianceModel,
    resolution: int,
    delta: Optional[float] = None,
    settings: Optional[Settings] = None,
) -> PairPlan:
    """
    Far field on the quadrature grid, near field on polar shells around the
    diagonal and around every exactly degenerate off-diagonal node, glued by
    a smooth partition of unity.
    """
    settings = settings or get_settings()
    domain = model.domain
    if not (model.stationary or model.isotropic):
        raise ModelError(
            f"{model.name}: two-point quadrature needs a stationary or isotropic model",
            "kacrice",
            "second_moment",
        )
    qdomain, chart = quadrature_chart(domain, resolution)
    spacing = chart.cell_size
    delta = delta or settings.tube_factor * spacing

    if domain.is_sphere:
        anchor = np.array([0.0, 0.0, 1.0])
        far = chart.nodes()
        cell = qdomain.mesh.vertex_areas * (4.0 * math.pi / qdomain.mesh.area)
        base = 0.5
    elif domain.is_periodic:
        anchor = np.asarray(domain.origin, dtype=float)
        far = anchor + domain.displacement(anchor, chart.nodes())
        cell = np.full(len(far), float(np.prod(chart.spacing)))
        base = 0.25 * min(domain.extents)
    else:
        anchor = np.asarray(domain.origin, dtype=float)
        axes = [h * np.arange(-chart.resolution, chart.resolution + 1) for h in chart.spacing]
        grids = np.meshgrid(*axes, indexing="ij")
        far = anchor + np.stack([g.reshape(-1) for g in grids], axis=1)
        cell = np.full(len(far), float(np.prod(chart.spacing)))
        base = 0.25 * min(domain.extents)

    distance = _separation(domain, np.broadcast_to(anchor, far.shape), far)
    off = distance > 0.5 * spacing
    eff = np.full(len(far), np.inf)
    eff[off] = effective_distance(model, np.broadcast_to(anchor, far[off].shape), far[off])
    exact = off & (eff < 1e-6 * delta)
    centres = [anchor] + [far[i] for i in np.flatnonzero(exact)]

    radius = base
    for i, c in enumerate(centres):
        for d in centres[i + 1 :]:
            radius = min(radius, 0.45 * float(_separation(domain, c, d)[0]))
    if delta > 0.5 * radius:
        logger.warning(f"Tube radius {delta:.4g} clamped to {0.5 * radius:.4g}")
        delta = 0.5 * radius

    weights = cell * _pair_weight(domain, anchor, far)
    cutoff = np.zeros(len(far))
    for c in centres:
        cutoff += _bump(_separation(domain, np.broadcast_to(c, far.shape), far) / radius)
    weights = weights * np.clip(1.0 - cutoff, 0.0, 1.0)
    keep = weights > 0
    near_degenerate = keep & off & (eff < delta)
    excised = int(np.count_nonzero(near_degenerate))
    if excised:
        logger.warning(
            f"{model.name}: excised {excised} far nodes with effective distance below {delta:.4g}"
        )
    keep &= ~near_degenerate

    points = [far[keep]]
    plan_weights = [weights[keep]]
    shells = [np.zeros(int(keep.sum()), dtype=np.int64)]
    for c in centres:
        for shell, (a, b, n) in enumerate(
            [(delta, radius, RADIAL_NODES), (0.5 * delta, delta, SHELL_NODES), (0.25 * delta, 0.5 * delta, SHELL_NODES)]
        ):
            pts, w, rr = _polar_nodes(domain, c, a, b, n)
            w = w * _bump(rr / radius) * _pair_weight(domain, anchor, pts)
            ok = w > 0
            points.append(pts[ok])
            plan_weights.append(w[ok])
            shells.append(np.full(int(ok.sum()), shell, dtype=np.int64))

    plan = PairPlan(
        anchor=anchor,
        points=np.vstack(points),
        weights=np.concatenate(plan_weights),
        shells=np.concatenate(shells),
        delta=float(delta),
        excised=excised,
        centres=len(centres) - 1,
    )
    if plan.centres:
        plan.notes.append(
            f"{plan.centres} fully correlated off-diagonal point(s) treated as singular centres"
        )
        logger.info(f"{model.name}: {plan.centres} degenerate off-diagonal centres detected")
    logger.info(
        f"Pair plan: {len(plan.points)} nodes, delta {plan.delta:.4g}, cutoff radius {radius:.4g}"
    )
    return plan


def _evaluate_plan(
    model: CovarianceModel,
    plan: PairPlan,
    integrand: Callable[[np.ndarray], np.ndarray],
    with_hessian: bool,
    include_kernel: bool,
    seed: int,
    n_samples: int,
    n_jobs: Optional[int],
    settings: Settings,
) -> np.ndarray:
    """Integrand value times intensity at every plan node, in node order."""
    domain = model.domain
    anchor = plan.anchor

    def block(bounds: tuple[int, int]) -> np.ndarray:
        start, stop = bounds
        q = plan.points[start:stop]
        p = np.broadcast_to(anchor, q.shape)
        r = _separation(domain, p, q)
        rows = _pair_matrix(model, p, q, r, with_hessian)
        residual, gram, relative = _regress_rows(rows, settings)
        if np.any(relative <= settings.conditioning_eps):
            worst = int(np.argmin(relative))
            logger.error(f"Degenerate pair at q={q[worst]} (relative {relative[worst]:.3e})")
            raise DegenerateConditioning(
                f"(X(p), X(q)) degenerate at q = {q[worst].tolist()} outside the tube",
                "kacrice",
                "second_moment",
            )
        det = gram[:, 0, 0] * gram[:, 1, 1] - gram[:, 0, 1] ** 2
        density = 1.0 / (2.0 * math.pi * r * np.sqrt(det))
        values = density * _expected_functional(residual, integrand, seed, start, n_samples)
        if include_kernel:
            values = values * model.kernel(anchor[None], q)[0]
        return values

    parts = run_ordered(block, row_blocks(len(plan.points), PAIR_BLOCK), n_jobs)
    return np.concatenate(parts) if parts else np.zeros(0)


def _shell_sums(plan: PairPlan, values: np.ndarray) -> list[float]:
    contrib = plan.weights * values
    return [float(np.sum(contrib[plan.shells <= k])) for k in range(3)]


def _extrapolate(coarse: float, fine: float, order: int) -> float:
    """Richardson step for a tube deficit scaling like delta^order."""
    return fine + (fine - coarse) / (2.0 ** order - 1.0)


def growth_ratios(values: Sequence[float]) -> list[float]:
    return [b / a if a else math.inf for a, b in zip(values, values[1:])]


def classify_refinement(
    values: Sequence[float], order: int, tolerance: float = 0.02
) -> tuple[str, float, float]:
    """
    Status of a delta, delta/2, delta/4 sequence whose tube deficit scales
    like delta^order (order 0 is logarithmic): converged, divergent or
    unresolved, with the limit and the relative drift it was judged on.

    Increments shrinking by at least 1/sqrt(2) per halving count as
    geometric; such a sequence is judged on its Richardson extrapolates and
    is never declared divergent.
    """
    s = [float(v) for v in values]
    scale = max(abs(v) for v in s)
    drift = max(abs(a - b) for a in s for b in s) / scale
    if drift <= tolerance:
        value = _extrapolate(s[1], s[2], order) if order > 0 else s[2]
        return "converged", value, drift

    steps = (s[1] - s[0], s[2] - s[1])
    shrinking = steps[0] != 0 and abs(steps[1]) <= abs(steps[0]) / math.sqrt(2.0)
    if order > 0 and shrinking:
        coarse = _extrapolate(s[0], s[1], order)
        fine = _extrapolate(s[1], s[2], order)
        drift = abs(fine - coarse) / max(abs(fine), abs(coarse))
        if drift <= tolerance:
            return "converged", fine, drift

    increasing = s[0] < s[1] < s[2]
    if increasing and not shrinking and min(growth_ratios(s)) >= 1.2:
        return "divergent", math.inf, drift
    return "unresolved", math.nan, drift


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def _one_point_expectation(
    value: np.ndarray,
    gradient: np.ndarray,
    seed: int,
    index: int,
    n_samples: int,
    tol: float = 1e-10,
) -> tuple[float, bool]:
    """
    E[|G| | X = 0] for rows X = value (R,), G = gradient (k,R). Closed form
    when G is isotropic and uncorrelated with X, regression Monte Carlo
    otherwise. Returns the value and whether the closed form was used.
    """
    k = gradient.shape[0]
    var = float(value @ value)
    cross = gradient @ value
    gcov = gradient @ gradient.T
    sigma2 = float(np.trace(gcov)) / k
    scale = max(sigma2, var, 1e-300)
    if np.max(np.abs(cross)) <= tol * math.sqrt(scale * var) and np.max(
        np.abs(gcov - sigma2 * np.eye(k))
    ) <= tol * scale:
        mean_norm = math.sqrt(2.0 * sigma2) * math.exp(
            special.gammaln((k + 1) / 2.0) - special.gammaln(k / 2.0)
        )
        return mean_norm, True
    residual = gradient - np.outer(cross / var, value)
    z = pair_rng(seed, index).standard_normal((n_samples, len(value)))
    return float(np.mean(np.linalg.norm(z @ residual.T, axis=1))), False


def expected_volume(
    model: CovarianceModel,
    domain: Optional[Domain] = None,
    resolution: Optional[int] = None,
    seed: int = 0,
    mc_samples: Optional[int] = None,
) -> float:
    """
    One-point Kac-Rice: int_M E[|d_pX| | X(p) = 0] / sqrt(2 pi C(p,p)) dM.
    Stationary and isotropic models need a single node.
    """
    settings = get_settings()
    domain = domain or model.domain
    resolution = resolution or settings.quadrature_resolution
    n_samples = mc_samples or settings.mc_samples
    if model.stationary or model.isotropic:
        nodes = np.asarray(domain.origin if not domain.is_sphere else [0.0, 0.0, 1.0])[None]
        weights = np.array([domain.analytic_volume])
    else:
        nodes, weights = quadrature(*quadrature_chart(domain, resolution))
    rows = jet_rows(model, nodes)
    total = 0.0
    closed = 0
    for i in range(len(nodes)):
        mean_norm, exact = _one_point_expectation(
            rows.value[i], rows.gradient[i], seed, i, n_samples
        )
        closed += exact
        var = float(rows.value[i] @ rows.value[i])
        total += weights[i] * mean_norm / math.sqrt(2.0 * math.pi * var)
    logger.info(
        f"{model.name}: expected volume {total:.8g} from {len(nodes)} nodes "
        f"({closed} in closed form)"
    )
    return float(total)


def expected_boundary_volume(
    model: CovarianceModel,
    domain: Optional[Domain] = None,
    resolution: Optional[int] = None,
    seed: int = 0,
    mc_samples: Optional[int] = None,
) -> float:
    """E[H^{m-2}(dZ)] from one-point Kac-Rice for X restricted to each face."""
    settings = get_settings()
    domain = domain or model.domain
    if not domain.has_boundary:
        return 0.0
    resolution = resolution or settings.quadrature_resolution
    n_samples = mc_samples or settings.mc_samples
    points, weights, normals = boundary_quadrature(*quadrature_chart(domain, resolution))
    if model.stationary:
        # one node per face
        _, first = np.unique(normals, axis=0, return_index=True)
        first = np.sort(first)
        face_weights = np.array(
            [weights[np.all(normals == normals[i], axis=1)].sum() for i in first]
        )
        points, weights, normals = points[first], face_weights, normals[first]
    rows = jet_rows(model, points)
    total = 0.0
    for i in range(len(points)):
        axis = int(np.argmax(np.abs(normals[i])))
        tangential = np.delete(rows.gradient[i], axis, axis=0)
        mean_norm, _ = _one_point_expectation(
            rows.value[i], tangential, seed, i, n_samples
        )
        var = float(rows.value[i] @ rows.value[i])
        total += weights[i] * mean_norm / math.sqrt(2.0 * math.pi * var)
    return float(total)


def second_moment(
    model: CovarianceModel,
    domain: Optional[Domain] = None,
    resolution: Optional[int] = None,
    delta: Optional[float] = None,
    seed: int = 0,
    mc_samples: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> KacRiceReport:
    """
    E[V^2] by the two-point formula with the tube dist(p,q) < delta excised,
    evaluated at delta, delta/2 and delta/4 and extrapolated to delta = 0.
    """
    settings = get_settings()
    domain = domain or model.domain
    resolution = resolution or settings.quadrature_resolution
    n_samples = mc_samples or settings.mc_samples
    m = domain.dims
    plan = pair_plan(model, resolution, delta, settings)
    values = _evaluate_plan(
        model, plan, volume_functional(m), False, False, seed, n_samples, n_jobs, settings
    )
    sums = _shell_sums(plan, values)
    # the excised tube carries delta^(m-1) of the volume integrand
    coarse = _extrapolate(sums[0], sums[1], m - 1)
    fine = _extrapolate(sums[1], sums[2], m - 1)
    drift = abs(fine - coarse) / abs(fine) if fine else 0.0
    mean = expected_volume(model, domain, resolution, seed, n_samples)
    logger.info(
        f"{model.name}: E[V^2] = {fine:.8g} (delta values {sums}), drift {drift:.3e}"
    )
    return KacRiceReport(
        quantity="second_moment",
        value=fine,
        deltas=[plan.delta, 0.5 * plan.delta, 0.25 * plan.delta],
        values=sums,
        drift=drift,
        excised_pairs=plan.excised,
        variance=fine - mean**2,
        nodes=len(plan.points),
    )


def _boundary_terms(
    model: CovarianceModel,
    resolution: int,
    delta: float,
    seed: int,
    n_samples: int,
    settings: Settings,
) -> np.ndarray:
    """
    Boundary-boundary minus twice interior-boundary contributions of the
    derivative norm on a Rectangle, per delta shell, by direct grid sums.
    """
    domain = model.domain
    m = domain.dims
    qdomain, chart = quadrature_chart(domain, resolution)
    b_points, b_weights, b_normals = boundary_quadrature(qdomain, chart)
    i_points, i_weights = quadrature(qdomain, chart)
    b_rows = jet_rows(model, b_points, True)
    i_rows = jet_rows(model, i_points, True)

    def sums(p_rows, p_idx, p_w, p_pts, q_idx, q_w, q_pts, q_normals, functional_kind, offset):
        out = np.zeros(3)
        pp, qq = p_pts[p_idx], q_pts[q_idx]
        r = _separation(domain, pp, qq)
        shell = np.where(r >= delta, 0, np.where(r >= 0.5 * delta, 1, np.where(r >= 0.25 * delta, 2, -1)))
        ok = shell >= 0
        if not ok.any():
            return out
        p_idx, q_idx, r, shell = p_idx[ok], q_idx[ok], r[ok], shell[ok]
        rows = np.concatenate(
            [
                p_rows.value[p_idx][:, None, :],
                ((b_rows.value[q_idx] - p_rows.value[p_idx]) / r[:, None])[:, None, :],
                p_rows.gradient[p_idx],
                b_rows.gradient[q_idx],
                p_rows.hessian[p_idx],
                b_rows.hessian[q_idx],
            ],
            axis=1,
        )
        residual, gram, relative = _regress_rows(rows, settings)
        good = relative > settings.conditioning_eps
        det = gram[:, 0, 0] * gram[:, 1, 1] - gram[:, 0, 1] ** 2
        density = np.where(good, 1.0 / (2.0 * math.pi * r * np.sqrt(np.abs(det))), 0.0)
        nq = q_normals[q_idx]
        p_normals = b_normals[p_idx] if functional_kind == "bb" else None

        def functional(samples, pairs):
            gp, gq, hp, _ = _split(samples, m, True)
            g_q = np.sum(gq * nq[pairs], axis=1) / np.linalg.norm(gq, axis=1)
            if functional_kind == "bb":
                return np.sum(gp * p_normals[pairs], axis=1) / np.linalg.norm(gp, axis=1) * g_q
            return _curvature(gp, hp, m) * g_q

        kernel = np.sum(p_rows.value[p_idx] * b_rows.value[q_idx], axis=1)
        weight = p_w[p_idx] * q_w[q_idx] * density * kernel
        good_idx = np.flatnonzero(good)
        n_rows, n_basis = residual.shape[1], residual.shape[2]
        block = max(1, SAMPLE_BLOCK // (n_samples * max(n_rows, n_basis)))
        for start, stop in row_blocks(len(good_idx), block):
            pairs = good_idx[start:stop]
            z = pair_rng(seed, offset + start).standard_normal((len(pairs), n_samples, n_basis))
            samples = np.einsum("bsk,bfk->bsf", z, residual[pairs]).reshape(-1, n_rows)
            values = functional(samples, np.repeat(pairs, n_samples))
            contrib = weight[pairs] * values.reshape(len(pairs), n_samples).mean(axis=1)
            for k in range(3):
                out[k] += float(contrib[shell[pairs] <= k].sum())
        return out

    nb, ni = len(b_points), len(i_points)
    bp, bq = np.meshgrid(np.arange(nb), np.arange(nb), indexing="ij")
    bb = sums(b_rows, bp.reshape(-1), b_weights, b_points, bq.reshape(-1), b_weights, b_points, b_normals, "bb", 10**9)
    ip, iq = np.meshgrid(np.arange(ni), np.arange(nb), indexing="ij")
    ib = sums(i_rows, ip.reshape(-1), i_weights, i_points, iq.reshape(-1), b_weights, b_points, b_normals, "ib", 2 * 10**9)
    return bb - 2.0 * ib


def derivative_norm_sq_expectation(
    model: CovarianceModel,
    domain: Optional[Domain] = None,
    m: Optional[int] = None,
    resolution: Optional[int] = None,
    delta: Optional[float] = None,
    seed: int = 0,
    mc_samples: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> KacRiceReport | DivergenceReport:
    """
    E |d_X V|^2 over the Cameron-Martin space: the two-point integral of
    K(p,q) E[tilde-Lap X(p)/|dX(p)| * tilde-Lap X(q)/|dX(q)| | X(p)=X(q)=0]
    against the two-point density, under delta-refinement.
    """
    settings = get_settings()
    domain = domain or model.domain
    m = m or domain.dims
    if m != domain.dims:
        raise ModelError(
            f"m = {m} does not match the domain dimension {domain.dims}",
            "kacrice",
            "derivative_norm_sq_expectation",
        )
    if m == 3:
        model.check_hessian_nondegeneracy()
    resolution = resolution or settings.quadrature_resolution
    n_samples = mc_samples or settings.mc_samples

    plan = pair_plan(model, resolution, delta, settings)
    values = _evaluate_plan(
        model, plan, derivative_functional(m), True, True, seed, n_samples, n_jobs, settings
    )
    sums = np.asarray(_shell_sums(plan, values))
    if domain.has_boundary:
        sums = sums + _boundary_terms(model, resolution, plan.delta, seed, n_samples, settings)
    sums = [float(s) for s in sums]
    deltas = [plan.delta, 0.5 * plan.delta, 0.25 * plan.delta]

    scale = max(abs(s) for s in sums)
    # V^2 * lambda carries the units of the derivative norm
    reference = expected_volume(model, domain, resolution, seed, n_samples) ** 2 * float(
        _gradient_scale(jet_rows(model, plan.anchor[None]))[0]
    )
    if scale <= 1e-10 * reference:
        logger.info(f"{model.name}: derivative norm vanishes (largest shell sum {scale:.3e})")
        return KacRiceReport(
            quantity="derivative_norm_sq", value=0.0, deltas=deltas, values=sums, nodes=len(plan.points)
        )
    # the derivative integrand behaves like dist^-2, so the tube holds delta^(m-2)
    status, value, drift = classify_refinement(sums, m - 2)
    if status == "converged":
        logger.info(f"{model.name}: derivative norm converged to {value:.8g} (drift {drift:.3e})")
        return KacRiceReport(
            quantity="derivative_norm_sq",
            value=value,
            deltas=deltas,
            values=sums,
            drift=drift,
            excised_pairs=plan.excised,
            nodes=len(plan.points),
        )
    logger.warning(
        f"{model.name}: derivative norm {status} under tube refinement, values {sums}"
    )
    return DivergenceReport(
        quantity="derivative_norm_sq",
        status=status,
        deltas=deltas,
        values=sums,
        growth_ratios=growth_ratios(sums),
    )


def near_diagonal_diagnostic(
    model: CovarianceModel,
    p: np.ndarray,
    v: np.ndarray,
    distances: Sequence[float],
    seed: int = 0,
    mc_samples: Optional[int] = None,
) -> list[dict[str, float]]:
    """
    Scaling table along q = exp_p(t v): density factor, the volume and
    derivative conditional expectations, and their products with t.
    """
    settings = get_settings()
    distances = [float(t) for t in distances]
    if any(t <= 0 for t in distances) or any(
        b >= a for a, b in zip(distances, distances[1:])
    ):
        raise ModelError(
            "distances must be positive and decreasing",
            "kacrice",
            "near_diagonal_diagnostic",
        )
    n_samples = mc_samples or settings.mc_samples
    domain = model.domain
    m = domain.dims
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)

    table = []
    for i, t in enumerate(distances):
        q = exp_map(domain, p, t * v) if domain.is_sphere else p + t * v
        r = np.array([t])
        rows = _pair_matrix(model, p[None], q[None], r, True)
        residual, gram, relative = _regress_rows(rows, settings)
        if relative[0] <= settings.conditioning_eps:
            raise DegenerateConditioning(
                f"degenerate pair at distance {t:.3e}", "kacrice", "near_diagonal_diagnostic"
            )
        det = float(gram[0, 0, 0] * gram[0, 1, 1] - gram[0, 0, 1] ** 2)
        density = 1.0 / (2.0 * math.pi * t * math.sqrt(det))
        z = pair_rng(seed, i).standard_normal((n_samples, residual.shape[2]))
        samples = z @ residual[0].T
        volume = float(np.mean(volume_functional(m)(samples[:, : 2 * m])))
        derivative = float(np.mean(derivative_functional(m)(samples)))
        table.append(
            {
                "t": t,
                "density_factor": density,
                "volume_integrand": volume,
                "derivative_integrand": derivative,
                "t_times_derivative": t * derivative,
                "t_times_density": t * 2.0 * math.pi * density,
            }
        )
    return table
