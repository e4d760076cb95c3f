from typing import Optional

import numpy as np
from scipy import sparse

from nodal_lab.config import Settings, get_settings
from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import NotMinimal
from nodal_lab.fields import FieldFunction
from nodal_lab.geometry import Domain, GridChart
from nodal_lab.logger import logger
from nodal_lab.nodal import (
    NodalSet,
    extract_nodal_set,
    field_scale,
    mean_curvature,
    nodal_volume,
)
from nodal_lab.schemas import VariationReport
from nodal_lab.tasks import row_blocks, run_ordered

CM_BLOCK_ROWS = 512


def pairing(nodal: NodalSet) -> tuple[np.ndarray, np.ndarray]:
    """
    Points x_i and coefficients c_i with <d_f V, h> = sum_i c_i h(x_i): the
    interior elements carry -w tilde-Laplacian / |df|^2, the boundary
    elements w g(n, nu) / |d(f|dM)|.
    """
    interior = -nodal.weights * nodal.tilde_laplacian / nodal.grad_norm**2
    if len(nodal.boundary_weights) == 0:
        return nodal.points, interior
    boundary = nodal.boundary_weights * nodal.boundary_g / nodal.boundary_grad_norm
    return (
        np.vstack([nodal.points, nodal.boundary_points]),
        np.concatenate([interior, boundary]),
    )


def first_variation(
    f: FieldFunction,
    h: FieldFunction,
    domain: Domain,
    chart: GridChart,
    nodal: Optional[NodalSet] = None,
) -> VariationReport:
    """<d_f V, h> = -int_Z h tilde-Lap f / |df|^2 + int_dZ h g(n, nu) / |d(f|dM)|."""
    nodal = nodal or extract_nodal_set(f, domain, chart)
    interior = 0.0
    if len(nodal):
        density = nodal.tilde_laplacian / nodal.grad_norm**2
        interior = float(np.sum(nodal.weights * h.evaluate(nodal.points) * density))
    boundary = 0.0
    if len(nodal.boundary_weights):
        density = nodal.boundary_g / nodal.boundary_grad_norm
        boundary = float(
            np.sum(nodal.boundary_weights * h.evaluate(nodal.boundary_points) * density)
        )
    return VariationReport(
        interior_term=interior, boundary_term=boundary, total=boundary - interior
    )


def default_fd_step(
    f: FieldFunction, h: FieldFunction, chart: GridChart, relative: float = 1e-3
) -> float:
    nodes = chart.nodes()
    return relative * field_scale(f.evaluate(nodes)) / field_scale(h.evaluate(nodes))


def _volume(f: FieldFunction, domain: Domain, chart: GridChart) -> float:
    return nodal_volume(extract_nodal_set(f, domain, chart))


def fd_first_variation(
    f: FieldFunction,
    h: FieldFunction,
    eps: Optional[float],
    domain: Domain,
    chart: GridChart,
) -> float:
    """Richardson-extrapolated central difference of t -> V(f + t h) at 0."""
    eps = eps or default_fd_step(f, h, chart)

    def central(step: float) -> float:
        plus = _volume(f + step * h, domain, chart)
        minus = _volume(f - step * h, domain, chart)
        return (plus - minus) / (2.0 * step)

    coarse = central(eps)
    fine = central(0.5 * eps)
    value = (4.0 * fine - coarse) / 3.0
    logger.debug(f"FD first variation: D(eps)={coarse:.10g}, D(eps/2)={fine:.10g}")
    return value


def fd_second_variation(
    f: FieldFunction,
    h: FieldFunction,
    eps: Optional[float],
    domain: Domain,
    chart: GridChart,
) -> float:
    """Richardson-extrapolated second central difference of t -> V(f + t h)."""
    eps = eps or default_fd_step(f, h, chart)
    base = _volume(f, domain, chart)

    def second(step: float) -> float:
        plus = _volume(f + step * h, domain, chart)
        minus = _volume(f - step * h, domain, chart)
        return (plus - 2.0 * base + minus) / step**2

    coarse = second(eps)
    fine = second(0.5 * eps)
    return (4.0 * fine - coarse) / 3.0


def cm_norm_sq(
    f: FieldFunction,
    model: CovarianceModel,
    domain: Domain,
    chart: GridChart,
    nodal: Optional[NodalSet] = None,
    n_jobs: Optional[int] = None,
) -> float:
    """
    |d_f V|^2 in the Cameron-Martin space: sum_ij c_i c_j K(x_i, x_j) over
    the interior and boundary elements, computed in row blocks.
    """
    nodal = nodal or extract_nodal_set(f, domain, chart)
    points, coeffs = pairing(nodal)
    if len(points) == 0:
        return 0.0

    def block(bounds: tuple[int, int]) -> float:
        start, stop = bounds
        return float(coeffs[start:stop] @ (model.kernel(points[start:stop], points) @ coeffs))

    parts = run_ordered(block, row_blocks(len(points), CM_BLOCK_ROWS), n_jobs)
    return float(sum(parts))


def _polyline_derivative_sq(nodal: NodalSet, psi: np.ndarray) -> np.ndarray:
    """
    Squared arclength derivative of psi along the polyline, from the
    three-point non-uniform difference over neighbouring elements.
    """
    n = len(nodal)
    cells = nodal.cells
    vertex = cells.reshape(-1)
    element = np.repeat(np.arange(n), 2)
    slot = np.tile([0, 1], n)
    order = np.lexsort((element, vertex))
    v, e, s = vertex[order], element[order], slot[order]
    shared = np.flatnonzero(v[:-1] == v[1:])
    other = np.full((n, 2), -1, dtype=np.int64)
    other[e[shared], s[shared]] = e[shared + 1]
    other[e[shared + 1], s[shared + 1]] = e[shared]

    w = nodal.weights
    prev, nxt = other[:, 0], other[:, 1]
    has_prev, has_next = prev >= 0, nxt >= 0
    a = 0.5 * (w + w[np.where(has_prev, prev, 0)])
    b = 0.5 * (w + w[np.where(has_next, nxt, 0)])
    psi_prev = psi[np.where(has_prev, prev, 0)]
    psi_next = psi[np.where(has_next, nxt, 0)]

    both = has_prev & has_next
    deriv = np.zeros(n)
    deriv[both] = (
        a[both] ** 2 * psi_next[both]
        - b[both] ** 2 * psi_prev[both]
        + (b[both] ** 2 - a[both] ** 2) * psi[both]
    ) / (a[both] * b[both] * (a[both] + b[both]))
    only_next = has_next & ~has_prev
    deriv[only_next] = (psi_next[only_next] - psi[only_next]) / b[only_next]
    only_prev = has_prev & ~has_next
    deriv[only_prev] = (psi[only_prev] - psi_prev[only_prev]) / a[only_prev]
    return deriv**2


def _surface_gradient_sq(nodal: NodalSet, psi: np.ndarray) -> np.ndarray:
    """Least-squares tangential gradient over each triangle's vertex fan."""
    n = len(nodal)
    n_vertices = int(nodal.cells.max()) + 1
    incidence = sparse.csr_matrix(
        (np.ones(3 * n), (np.repeat(np.arange(n), 3), nodal.cells.reshape(-1))),
        shape=(n, n_vertices),
    )
    adjacency = (incidence @ incidence.T).tocoo()
    mask = adjacency.row != adjacency.col
    rows, cols = adjacency.row[mask], adjacency.col[mask]

    nu = nodal.normals
    helper = np.zeros_like(nu)
    helper[np.arange(n), np.argmin(np.abs(nu), axis=1)] = 1.0
    t1 = helper - np.sum(helper * nu, axis=1, keepdims=True) * nu
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(nu, t1)

    d = nodal.domain.displacement(nodal.points[rows], nodal.points[cols])
    u = np.stack([np.sum(d * t1[rows], axis=1), np.sum(d * t2[rows], axis=1)], axis=1)
    diff = psi[cols] - psi[rows]
    normal = np.zeros((n, 2, 2))
    rhs = np.zeros((n, 2))
    np.add.at(normal, rows, u[:, :, None] * u[:, None, :])
    np.add.at(rhs, rows, u * diff[:, None])
    det = normal[:, 0, 0] * normal[:, 1, 1] - normal[:, 0, 1] ** 2
    ok = det > 1e-14 * np.maximum(np.trace(normal, axis1=1, axis2=2) ** 2, 1e-300)
    grad = np.zeros((n, 2))
    grad[ok, 0] = (normal[ok, 1, 1] * rhs[ok, 0] - normal[ok, 0, 1] * rhs[ok, 1]) / det[ok]
    grad[ok, 1] = (normal[ok, 0, 0] * rhs[ok, 1] - normal[ok, 0, 1] * rhs[ok, 0]) / det[ok]
    return np.sum(grad**2, axis=1)


def second_fundamental_form_sq(nodal: NodalSet) -> np.ndarray:
    """|II|^2 = |P_T Hess f P_T|^2 / |df|^2 with P_T the projector onto TZ."""
    nu = nodal.normals
    eye = np.eye(nu.shape[1])[None]
    proj = eye - nu[:, :, None] * nu[:, None, :]
    if nodal.domain.is_sphere:
        p = nodal.points
        proj = proj - p[:, :, None] * p[:, None, :]
    restricted = np.einsum("nij,njk,nkl->nil", proj, nodal.jet.hessian, proj)
    return np.sum(restricted**2, axis=(1, 2)) / nodal.grad_norm**2


def second_variation_minimal(
    f: FieldFunction,
    h: FieldFunction,
    domain: Domain,
    chart: GridChart,
    ricci_in_normal_direction: Optional[float] = None,
    nodal: Optional[NodalSet] = None,
    settings: Optional[Settings] = None,
) -> float:
    """
    Second variation int_Z |d psi|^2 - psi^2 (|II|^2 + Ric(nu, nu)) dZ with
    psi = -h / |df|, valid when Z is minimal.
    """
    settings = settings or get_settings()
    nodal = nodal or extract_nodal_set(f, domain, chart)
    if len(nodal) == 0:
        return 0.0

    curvature = float(np.max(np.abs(mean_curvature(nodal))))
    if curvature > settings.minimality_threshold:
        logger.error(f"Nodal set is not minimal: max |H| = {curvature:.3e}")
        raise NotMinimal(
            f"max |H_Z| = {curvature:.3e} exceeds {settings.minimality_threshold:.1e}",
            "variation",
            "second_variation_minimal",
        )
    if ricci_in_normal_direction is None:
        ricci_in_normal_direction = 1.0 if domain.is_sphere else 0.0

    psi = -h.evaluate(nodal.points) / nodal.grad_norm
    if nodal.cells.shape[1] == 2:
        dpsi_sq = _polyline_derivative_sq(nodal, psi)
    else:
        dpsi_sq = _surface_gradient_sq(nodal, psi)
    integrand = dpsi_sq - psi**2 * (
        second_fundamental_form_sq(nodal) + ricci_in_normal_direction
    )
    return float(np.sum(nodal.weights * integrand))
