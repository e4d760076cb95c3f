import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from nodal_lab.config import Settings, get_settings
from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import (
    InsufficientSamples,
    ModelError,
    MorseFloorViolation,
    NewtonStall,
)
from nodal_lab.fields import ConstantField, FieldFunction, intrinsic_jet, sample_field
from nodal_lab.geometry import Domain, GridChart, geodesic_distance, tangent_frames
from nodal_lab.logger import logger
from nodal_lab.nodal import extract_nodal_set, field_scale, nodal_volume
from nodal_lab.schemas import CriticalZeroRecord, ExponentFit, SegmentScanReport
from nodal_lab.tasks import member_seeds, run_ordered
from nodal_lab.variation import first_variation


class Stratum(str, enum.Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"


class LevelIntegrand(str, enum.Enum):
    VOLUME = "volume"
    CURVATURE = "curvature"
    POWER = "power"


@dataclass(frozen=True, eq=False)
class CriticalZero:
    point: np.ndarray
    t: float
    stratum: Stratum
    index: int
    eigenvalues: np.ndarray
    certificate: float

    def to_record(self) -> CriticalZeroRecord:
        return CriticalZeroRecord(
            point=self.point.tolist(),
            t=self.t,
            stratum=self.stratum.value,
            index=self.index,
            eigenvalues=self.eigenvalues.tolist(),
            certificate=self.certificate,
        )


def morse_index(
    hessian: np.ndarray,
    stratum: Stratum = Stratum.INTERIOR,
    settings: Optional[Settings] = None,
) -> int:
    """Number of negative eigenvalues of a non-degenerate Hessian."""
    return _index_and_eigenvalues(np.asarray(hessian, float), stratum, settings)[0]


def _index_and_eigenvalues(
    hessian: np.ndarray, stratum: Stratum, settings: Optional[Settings] = None
) -> tuple[int, np.ndarray]:
    settings = settings or get_settings()
    eigvals = np.linalg.eigvalsh(0.5 * (hessian + hessian.T))
    scale = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    if scale == 0.0 or float(np.min(np.abs(eigvals))) < settings.morse_floor * scale:
        logger.error(f"Degenerate {stratum.value} Hessian, eigenvalues {eigvals}")
        raise MorseFloorViolation(
            f"{stratum.value} Hessian eigenvalues {eigvals.tolist()} violate the Morse floor",
            "morse",
            "morse_index",
        )
    return int(np.count_nonzero(eigvals < 0)), eigvals


# ---------------------------------------------------------------------------
# Critical zeros along segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Stratum:
    """Where a Newton search runs: tangent frames and the retraction back."""

    kind: Stratum
    frames: Callable[[np.ndarray], np.ndarray]
    retract: Callable[[np.ndarray], np.ndarray]
    inside: Callable[[np.ndarray], np.ndarray]


def _interior_stratum(domain: Domain) -> _Stratum:
    def retract(x):
        if domain.is_sphere:
            return x / np.linalg.norm(x, axis=1, keepdims=True)
        return domain.wrap(x) if domain.is_periodic else x

    def inside(x):
        if not domain.has_boundary:
            return np.ones(len(x), dtype=bool)
        lo = np.asarray(domain.origin)
        hi = lo + np.asarray(domain.extents)
        return np.all((x > lo) & (x < hi), axis=1)

    return _Stratum(Stratum.INTERIOR, lambda x: tangent_frames(domain, x), retract, inside)


def _face_stratum(domain: Domain, axis: int, value: float) -> _Stratum:
    keep = [a for a in range(domain.dims) if a != axis]
    frame = np.eye(domain.dims)[:, keep]

    def retract(x):
        x = x.copy()
        x[:, axis] = value
        return x

    def inside(x):
        lo = np.asarray(domain.origin)[keep]
        hi = lo + np.asarray(domain.extents)[keep]
        return np.all((x[:, keep] > lo) & (x[:, keep] < hi), axis=1)

    return _Stratum(
        Stratum.BOUNDARY, lambda x: np.broadcast_to(frame, (len(x),) + frame.shape), retract, inside
    )


def _local_minima(values: np.ndarray, periodic: bool) -> np.ndarray:
    out = np.ones(values.shape, dtype=bool)
    for axis in range(values.ndim):
        for shift in (1, -1):
            neighbour = np.roll(values, shift, axis=axis)
            if not periodic:
                edge = [slice(None)] * values.ndim
                edge[axis] = 0 if shift == 1 else -1
                neighbour[tuple(edge)] = np.inf
            out &= values <= neighbour
    return out


def _mesh_local_minima(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    lowest = np.full(len(values), np.inf)
    np.minimum.at(lowest, edges[:, 0], values[edges[:, 1]])
    np.minimum.at(lowest, edges[:, 1], values[edges[:, 0]])
    return values <= lowest


def _sweep(
    f: FieldFunction,
    h: FieldFunction,
    points: np.ndarray,
    frames: np.ndarray,
    interval: tuple[float, float],
    spacing: float,
    scale: float,
    settings: Settings,
    domain: Domain,
) -> tuple[np.ndarray, np.ndarray]:
    """Best scaled residual max(|f_t|, |d f_t| spacing) / scale over the t-sweep."""
    jf = intrinsic_jet(f, points, domain)
    jh = intrinsic_jet(h, points, domain)
    gf = np.einsum("nd,ndk->nk", jf.gradient, frames)
    gh = np.einsum("nd,ndk->nk", jh.gradient, frames)
    best = np.full(len(points), np.inf)
    best_t = np.zeros(len(points))
    for t in np.linspace(interval[0], interval[1], settings.seed_sweep_steps + 1):
        value = np.abs(jf.value + t * jh.value)
        grad = np.linalg.norm(gf + t * gh, axis=1) * spacing
        residual = np.maximum(value, grad) / scale
        better = residual < best
        best[better] = residual[better]
        best_t[better] = t
    return best, best_t


def _newton(
    f: FieldFunction,
    h: FieldFunction,
    x: np.ndarray,
    t: np.ndarray,
    stratum: _Stratum,
    domain: Domain,
    scale: float,
    settings: Settings,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Newton on (f + t h)(p) = 0, d_p(f + t h) = 0 in the unknowns (p, t), all
    seeds at once. Returns points, parameters and a convergence mask.
    """
    tol = settings.newton_tol * scale
    x, t = x.copy(), t.copy()
    done = np.zeros(len(x), dtype=bool)
    for _ in range(settings.newton_max_iter):
        jf = intrinsic_jet(f, x, domain)
        jh = intrinsic_jet(h, x, domain)
        frames = stratum.frames(x)
        value = jf.value + t * jh.value
        grad = np.einsum("nd,ndk->nk", jf.gradient + t[:, None] * jh.gradient, frames)
        residual = np.maximum(np.abs(value), np.max(np.abs(grad), axis=1))
        done = residual <= tol
        active = ~done & np.isfinite(residual)
        if not active.any():
            break
        k = frames.shape[2]
        hess = np.einsum(
            "ndk,nde,nel->nkl", frames, jf.hessian + t[:, None, None] * jh.hessian, frames
        )
        gh = np.einsum("nd,ndk->nk", jh.gradient, frames)
        jac = np.zeros((len(x), k + 1, k + 1))
        jac[:, 0, :k] = grad
        jac[:, 0, k] = jh.value
        jac[:, 1:, :k] = hess
        jac[:, 1:, k] = gh
        rhs = -np.concatenate([value[:, None], grad], axis=1)
        step = np.einsum("nij,nj->ni", np.linalg.pinv(jac[active]), rhs[active])
        moved = x[active] + np.einsum("ndk,nk->nd", frames[active], step[:, :k])
        x[active] = stratum.retract(moved)
        t[active] = t[active] + step[:, k]
    return x, t, done


def _merge(
    domain: Domain, x: np.ndarray, t: np.ndarray, tol: float
) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(t, kind="stable")
    kept: list[int] = []
    for i in order:
        if not any(
            abs(t[i] - t[j]) <= tol * (1.0 + abs(t[j]))
            and float(geodesic_distance(domain, x[i], x[j])) <= tol
            for j in kept
        ):
            kept.append(int(i))
    return x[kept], t[kept]


def _seeds(
    f: FieldFunction,
    h: FieldFunction,
    interval: tuple[float, float],
    domain: Domain,
    chart: GridChart,
    scale: float,
    settings: Settings,
) -> list[tuple[_Stratum, np.ndarray, np.ndarray]]:
    nodes = chart.nodes()
    spacing = chart.cell_size
    out = []
    interior = _interior_stratum(domain)
    best, best_t = _sweep(
        f, h, nodes, interior.frames(nodes), interval, spacing, scale, settings, domain
    )
    if domain.is_sphere:
        minima = _mesh_local_minima(best, domain.mesh.edges)
    else:
        minima = _local_minima(best.reshape(chart.shape), chart.periodic).reshape(-1)
    pick = minima & (best < settings.seed_threshold)
    out.append((interior, nodes[pick], best_t[pick]))

    for face in domain.boundary_faces():
        stratum = _face_stratum(domain, face.axis, face.value)
        index = [slice(None)] * domain.dims
        index[face.axis] = 0 if face.side == 0 else -1
        ids = np.arange(chart.node_count).reshape(chart.shape)[tuple(index)]
        points = nodes[ids.reshape(-1)]
        best, best_t = _sweep(
            f, h, points, stratum.frames(points), interval, spacing, scale, settings, domain
        )
        minima = _local_minima(best.reshape(ids.shape), False).reshape(-1)
        pick = minima & (best < settings.seed_threshold)
        out.append((stratum, points[pick], best_t[pick]))
    return out


def _scan(
    f: FieldFunction,
    h: FieldFunction,
    interval: tuple[float, float],
    domain: Domain,
    chart: GridChart,
    settings: Settings,
) -> tuple[list[CriticalZero], int]:
    nodes = chart.nodes()
    scale = max(field_scale(f.evaluate(nodes)), field_scale(h.evaluate(nodes)))
    length = math.pi if domain.is_sphere else max(domain.extents)
    merge_tol = 1e-6 * length
    span = interval[1] - interval[0]
    zeros: list[CriticalZero] = []
    stalled = 0

    for stratum, seeds, seed_t in _seeds(f, h, interval, domain, chart, scale, settings):
        if len(seeds) == 0:
            continue
        x, t, done = _newton(f, h, seeds, seed_t, stratum, domain, scale, settings)
        if (~done).any():
            count = int(np.count_nonzero(~done))
            stalled += count
            stall = NewtonStall(
                f"Newton stalled from {count} of {len(seeds)} {stratum.kind.value} seeds",
                "morse",
                "find_critical_zeros_on_segment",
            )
            logger.warning(f"{stall.message}; discarded", extra={"error_record": stall.to_record()})
        ok = done & stratum.inside(x)
        ok &= (t >= interval[0] - 1e-9 * span) & (t <= interval[1] + 1e-9 * span)
        x, t = _merge(domain, x[ok], t[ok], merge_tol)
        for p, tp in zip(x, t):
            jf = intrinsic_jet(f, p[None], domain)
            jh = intrinsic_jet(h, p[None], domain)
            frame = stratum.frames(p[None])[0]
            hess = frame.T @ (jf.hessian[0] + tp * jh.hessian[0]) @ frame
            index, eigvals = _index_and_eigenvalues(hess, stratum.kind, settings)
            certificate = float(jh.value[0])
            if abs(certificate) <= settings.newton_tol * scale:
                logger.warning(f"Vanishing transversality certificate at t={tp:.6g}")
            zeros.append(
                CriticalZero(
                    point=p, t=float(tp), stratum=stratum.kind, index=index,
                    eigenvalues=eigvals, certificate=certificate,
                )
            )
    zeros.sort(key=lambda z: (z.t, z.stratum.value, tuple(z.point)))
    return zeros, stalled


def find_critical_zeros_on_segment(
    f: FieldFunction,
    h: FieldFunction,
    interval: Sequence[float],
    domain: Domain,
    chart: GridChart,
    settings: Optional[Settings] = None,
) -> list[CriticalZero]:
    """
    Critical zeros of t -> f + t h on the interval: interior critical points
    of f_t at level 0, and on a Rectangle critical points of f_t restricted
    to the faces.
    """
    settings = settings or get_settings()
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ModelError("interval must be increasing", "morse", "find_critical_zeros_on_segment")
    zeros, _ = _scan(f, h, (lo, hi), domain, chart, settings)
    logger.info(f"Found {len(zeros)} critical zeros on t in [{lo:.6g}, {hi:.6g}]")
    return zeros


def segment_scan(
    model: CovarianceModel,
    chart: GridChart,
    n_segments: int,
    base_seed: int,
    interval: Sequence[float] = (0.0, 1.0),
    n_jobs: Optional[int] = None,
) -> SegmentScanReport:
    """Critical zeros on random segments X_i + t Y_i with independent samples."""
    settings = get_settings()
    seeds = member_seeds(base_seed, 2 * n_segments)
    lo, hi = float(interval[0]), float(interval[1])

    def one(i: int) -> tuple[int, int, int, Optional[float]]:
        f = sample_field(model, int(seeds[2 * i]))
        h = sample_field(model, int(seeds[2 * i + 1]))
        try:
            zeros, stalled = _scan(f, h, (lo, hi), model.domain, chart, settings)
        except MorseFloorViolation as err:
            logger.warning(f"Segment {i}: {err.message}")
            return 0, 1, 0, None
        certificate = min((abs(z.certificate) for z in zeros), default=None)
        return len(zeros), 0, stalled, certificate

    results = run_ordered(one, range(n_segments), n_jobs)
    counts = [r[0] for r in results]
    certificates = [r[3] for r in results if r[3] is not None]
    report = SegmentScanReport(
        model=model.name,
        base_seed=int(base_seed),
        interval=(lo, hi),
        segments=n_segments,
        root_counts=counts,
        floor_violations=sum(r[1] for r in results),
        stalled_seeds=sum(r[2] for r in results),
        min_certificate=min(certificates) if certificates else None,
        mean_roots_per_unit_t=float(np.mean(counts)) / (hi - lo),
    )
    logger.info(
        f"Segment scan: {sum(counts)} roots on {n_segments} segments, "
        f"{report.floor_violations} floor violations"
    )
    return report


# ---------------------------------------------------------------------------
# Level profiles
# ---------------------------------------------------------------------------


@dataclass
class LevelProfile:
    """phi(t) = V(T - t) and phi'(t) on a grid refined toward critical values."""

    t: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    flags: list[str]
    critical_zeros: list[CriticalZero]
    critical_values: list[float]
    ladder_step: dict[float, tuple[float, float]] = field(default_factory=dict)
    fits: list[ExponentFit] = field(default_factory=list)

    def rows(self) -> list[tuple[float, float, float, str]]:
        return list(zip(self.t.tolist(), self.phi.tolist(), self.dphi.tolist(), self.flags))

    def side(self, t0: float, side: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tau, phi, phi') on one side of t0 within its ladder span."""
        step = self.ladder_step.get(t0, (0.0, 0.0))[0 if side == "left" else 1]
        tau = self.t - t0
        mask = (tau < 0) if side == "left" else (tau > 0)
        mask &= np.abs(tau) <= step * (1 + 1e-12)
        order = np.argsort(np.abs(tau[mask]))
        return tau[mask][order], self.phi[mask][order], self.dphi[mask][order]


def _critical_values(zeros: list[CriticalZero], tol: float) -> list[float]:
    values: list[float] = []
    for z in sorted(zeros, key=lambda z: z.t):
        if not values or abs(z.t - values[-1]) > tol:
            values.append(z.t)
    return values


def level_profile(
    T: FieldFunction,
    domain: Domain,
    chart: GridChart,
    t_range: Sequence[float],
    t_resolution: int = 64,
    ladder_depth: int = 8,
    n_jobs: Optional[int] = None,
) -> LevelProfile:
    """
    Samples phi and phi' on a uniform grid plus the ladders t* +- 2^-j step,
    j = 0..ladder_depth, around every critical value. Critical levels
    themselves are skipped.
    """
    settings = get_settings()
    lo, hi = float(t_range[0]), float(t_range[1])
    span = hi - lo
    zeros = find_critical_zeros_on_segment(T, ConstantField(-1.0), (lo, hi), domain, chart, settings)
    critical = _critical_values(zeros, 1e-8 * (1.0 + span))
    logger.info(f"Critical values in range: {critical}")

    samples: dict[float, str] = {}
    for t in np.linspace(lo, hi, t_resolution):
        if all(abs(t - c) > 1e-9 * span for c in critical):
            samples[float(t)] = "grid"
    ladder_step: dict[float, tuple[float, float]] = {}
    for c in critical:
        others = [o for o in critical if o != c]
        left = 0.5 * min([c - lo] + [c - o for o in others if o < c])
        right = 0.5 * min([hi - c] + [o - c for o in others if o > c])
        ladder_step[c] = (max(left, 0.0), max(right, 0.0))
        for j in range(ladder_depth + 1):
            if left > 0:
                samples[c - left * 2.0**-j] = f"ladder-left:{c:.12g}"
            if right > 0:
                samples[c + right * 2.0**-j] = f"ladder-right:{c:.12g}"
    ts = sorted(samples)

    def measure(t: float) -> tuple[float, float]:
        level = T - t
        nodal = extract_nodal_set(level, domain, chart, settings)
        if len(nodal) == 0 and len(nodal.boundary_weights) == 0:
            return 0.0, 0.0
        return nodal_volume(nodal), first_variation(level, ConstantField(-1.0), domain, chart, nodal).total

    values = run_ordered(measure, ts, n_jobs)
    profile = LevelProfile(
        t=np.asarray(ts),
        phi=np.array([v[0] for v in values]),
        dphi=np.array([v[1] for v in values]),
        flags=[samples[t] for t in ts],
        critical_zeros=zeros,
        critical_values=critical,
        ladder_step=ladder_step,
    )
    for c in critical:
        for side in ("left", "right"):
            try:
                profile.fits.append(fit_exponent(profile, c, side))
            except InsufficientSamples:
                logger.debug(f"No {side} ladder at critical value {c:.6g}")
    return profile


def _power_law(tau, c, a, alpha):
    return c + a * tau**alpha


def _r_squared(y: np.ndarray, fitted: np.ndarray) -> float:
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        return 1.0
    return 1.0 - float(np.sum((y - fitted) ** 2)) / total


_TEMPLATES = {
    ("right", 1): "g0",
    ("right", -1): "g1",
    ("left", 1): "g1",
    ("left", -1): "g2",
}


def fit_exponent(profile: LevelProfile, t0: float, side: str) -> ExponentFit:
    """
    Fits phi'(t0 + tau) = c + a |tau|^alpha on one side of t0 and classifies
    the divergent part against g0, g1, g2, log and bounded.
    """
    if side not in ("left", "right"):
        raise ModelError(f"side must be left or right, got {side}", "morse", "fit_exponent")
    tau, _, dphi = profile.side(t0, side)
    if len(tau) < 5:
        raise InsufficientSamples(
            f"{len(tau)} samples on the {side} of {t0:.6g}, need 5",
            "morse",
            "fit_exponent",
        )
    r = np.abs(tau)
    plateau = float(np.median(dphi[-3:]))
    near = dphi[:-3] - plateau
    scale = float(np.max(np.abs(dphi)))
    variation = (float(dphi.max()) - float(dphi.min())) / scale if scale > 0 else 0.0

    alpha: Optional[float] = None
    sign = 0
    log_r2 = 0.0
    c = plateau
    usable = np.abs(near) > 0
    if usable.sum() >= 2:
        slope = float(np.polyfit(np.log(r[:-3][usable]), np.log(np.abs(near[usable])), 1)[0])
        a0 = float(near[0]) * r[0] ** (-slope)
        try:
            params, _ = optimize.curve_fit(
                _power_law, r, dphi, p0=(plateau, a0, slope), maxfev=20000
            )
            c, a, alpha = (float(v) for v in params)
        except (RuntimeError, ValueError):
            a, alpha = a0, slope
        sign = int(np.sign(a))
        design = np.column_stack([np.ones_like(r), np.log(1.0 / r)])
        coef, *_ = np.linalg.lstsq(design, dphi, rcond=None)
        log_r2 = _r_squared(dphi, design @ coef)

    if variation <= 0.1 or alpha is None:
        template = "bounded"
    elif alpha <= -0.25:
        template = _TEMPLATES[(side, sign)]
    elif log_r2 >= 0.99:
        template = "log"
    else:
        template = "bounded"

    fit = ExponentFit(
        side=side,
        alpha=alpha,
        sign=sign,
        template=template,
        log_r_squared=log_r2,
        plateau=c,
        points=len(tau),
    )
    logger.info(f"Critical value {t0:.6g} {side}: {template} (alpha={alpha}, sign={sign})")
    return fit


def profile_continuity(profile: LevelProfile, t0: float) -> list[dict[str, float]]:
    """|phi(t0 - d) - phi(t0 + d)| along the ladder offsets present on both sides."""
    left_step, right_step = profile.ladder_step.get(t0, (0.0, 0.0))
    if left_step == 0.0 or right_step == 0.0:
        raise InsufficientSamples(
            f"critical value {t0:.6g} has a ladder on one side only",
            "morse",
            "profile_continuity",
        )
    lookup = dict(zip(profile.t.tolist(), profile.phi.tolist()))
    rows = []
    j = 0
    while t0 - left_step * 2.0**-j in lookup and t0 + right_step * 2.0**-j in lookup:
        lt, rt = t0 - left_step * 2.0**-j, t0 + right_step * 2.0**-j
        rows.append(
            {
                "left_offset": left_step * 2.0**-j,
                "right_offset": right_step * 2.0**-j,
                "phi_left": lookup[lt],
                "phi_right": lookup[rt],
                "gap": abs(lookup[lt] - lookup[rt]),
            }
        )
        j += 1
    return rows


# ---------------------------------------------------------------------------
# Morse chart level integrals
# ---------------------------------------------------------------------------


def sphere_rule(n: int, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Product quadrature on the unit sphere S^{n-1} in R^n."""
    if n == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if n == 2:
        theta = 2.0 * math.pi * (np.arange(resolution) + 0.5) / resolution
        points = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return points, np.full(resolution, 2.0 * math.pi / resolution)
    x, w = np.polynomial.legendre.leggauss(resolution)
    theta = 0.5 * math.pi * (x + 1.0)
    w = 0.5 * math.pi * w * np.sin(theta) ** (n - 2)
    sub, sub_w = sphere_rule(n - 1, resolution)
    points = np.concatenate(
        [
            np.repeat(np.cos(theta), len(sub))[:, None],
            np.repeat(np.sin(theta), len(sub))[:, None] * np.tile(sub, (resolution, 1)),
        ],
        axis=1,
    )
    return points, np.repeat(w, len(sub)) * np.tile(sub_w, resolution)


def _chart_integrand(
    kind: LevelIntegrand, x: np.ndarray, signs: np.ndarray, metric_inv: np.ndarray, k: float
) -> np.ndarray:
    """h(x) for T = x^T diag(signs) x under a constant metric."""
    if kind == LevelIntegrand.VOLUME:
        return np.ones(len(x))
    if kind == LevelIntegrand.POWER:
        return np.linalg.norm(x, axis=1) ** (-k)
    dT = 2.0 * signs * x
    grad = dT @ metric_inv.T
    norm2 = np.sum(dT * grad, axis=1)
    laplacian = 2.0 * float(np.sum(np.diag(metric_inv) * signs))
    hess_gg = 2.0 * np.sum(signs * grad**2, axis=1)
    return (norm2 * laplacian - hess_gg) / norm2**2


def _metric_factor(covectors: np.ndarray, metric: np.ndarray, metric_inv: np.ndarray) -> np.ndarray:
    """Volume factor of the hyperplane annihilated by each covector."""
    unit = covectors / np.linalg.norm(covectors, axis=1, keepdims=True)
    quad = np.einsum("ni,ij,nj->n", unit, metric_inv, unit)
    return np.sqrt(np.linalg.det(metric) * quad)


def model_level_integral(
    n_plus: int,
    n_minus: int,
    metric: Optional[np.ndarray],
    integrand: LevelIntegrand | str,
    t: float,
    eps: float,
    k: float = 0.0,
    resolution: Optional[int] = None,
) -> float:
    """
    Integral of h over {T = t} in the chart T = |x+|^2 - |x-|^2 restricted
    to |x-| < sqrt(eps), by the radial representation in s = r / sqrt(t).
    """
    integrand = LevelIntegrand(integrand)
    m = n_plus + n_minus
    if n_plus < 0 or n_minus < 0 or m not in (2, 3, 4):
        raise ModelError(
            f"invalid signature ({n_plus}, {n_minus})", "morse", "model_level_integral"
        )
    metric = np.eye(m) if metric is None else np.asarray(metric, dtype=float)
    if metric.shape != (m, m) or not np.allclose(metric, metric.T):
        raise ModelError("metric must be a symmetric m x m matrix", "morse", "model_level_integral")
    if np.linalg.eigvalsh(metric).min() <= 0:
        raise ModelError("metric must be positive definite", "morse", "model_level_integral")
    if not 0.0 < t < eps**2:
        raise ModelError(f"t = {t} outside (0, eps^2)", "morse", "model_level_integral")
    resolution = resolution or get_settings().quadrature_resolution
    metric_inv = np.linalg.inv(metric)
    signs = np.concatenate([np.ones(n_plus), -np.ones(n_minus)])

    if n_plus == 0:
        return 0.0
    if n_minus == 0:
        x, w = sphere_rule(m, resolution)
        h = _chart_integrand(integrand, math.sqrt(t) * x, signs, metric_inv, k)
        return float(t ** ((m - 1) / 2.0) * np.sum(w * _metric_factor(x, metric, metric_inv) * h))

    u, wu = sphere_rule(n_plus, resolution)
    v, wv = sphere_rule(n_minus, resolution)
    uu = np.repeat(u, len(v), axis=0)
    vv = np.tile(v, (len(u), 1))
    wuv = np.repeat(wu, len(v)) * np.tile(wv, len(u))

    upper = math.sqrt(eps / t)
    s_nodes, s_weights = [], []
    x, w = np.polynomial.legendre.leggauss(2 * resolution)
    head = min(1.0, upper)
    s_nodes.append(0.5 * head * (x + 1.0))
    s_weights.append(0.5 * head * w)
    if upper > 1.0:
        # log-spaced tail, ds = s dw
        logs = 0.5 * math.log(upper) * (x + 1.0)
        s_nodes.append(np.exp(logs))
        s_weights.append(0.5 * math.log(upper) * w * np.exp(logs))
    s = np.concatenate(s_nodes)
    sw = np.concatenate(s_weights)

    total = 0.0
    for si, wi in zip(s, sw):
        points = np.concatenate([uu * math.sqrt(t * (si**2 + 1.0)), vv * si * math.sqrt(t)], axis=1)
        covectors = np.concatenate([uu * math.sqrt(si**2 + 1.0), -vv * si], axis=1)
        h_hat = float(
            np.sum(wuv * _metric_factor(covectors, metric, metric_inv)
                   * _chart_integrand(integrand, points, signs, metric_inv, k))
        )
        radial = (2 * si**2 + 1) ** 0.5 * (si**2 + 1) ** ((n_plus - 2) / 2.0) * si ** (n_minus - 1)
        total += wi * h_hat * radial
    return float(t ** ((m - 1) / 2.0) * total)
