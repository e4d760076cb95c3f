from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from nodal_lab.config import Settings, get_settings
from nodal_lab.errors import IntegrandFailure, RegularityViolation
from nodal_lab.fields import FieldFunction, Jet, intrinsic_jet
from nodal_lab.geometry import Domain, GridChart
from nodal_lab.logger import logger
from nodal_lab.marching import march


@dataclass(frozen=True, eq=False)
class NodalSet:
    """
    Discretised zero set Z = f^{-1}(0).

    Each element is a segment (m=2) or triangle (m=3, sphere segments
    included) represented by its projected centroid, its measure weight and
    the intrinsic jet of f there. Boundary elements are the points (m=2) or
    face segments (m=3) of Z meeting the Rectangle faces.
    """

    domain: Domain
    dims: int
    scale: float
    points: np.ndarray
    weights: np.ndarray
    jet: Jet
    cells: np.ndarray
    vertices: np.ndarray
    labels: np.ndarray
    n_components: int
    boundary_points: np.ndarray
    boundary_weights: np.ndarray
    boundary_normals: np.ndarray
    boundary_jet: Jet

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.jet.gradient, axis=1)

    @property
    def normals(self) -> np.ndarray:
        """Unit conormal grad f / |grad f|."""
        return self.jet.gradient / self.grad_norm[:, None]

    @property
    def laplacian(self) -> np.ndarray:
        return np.trace(self.jet.hessian, axis1=1, axis2=2)

    @property
    def hess_nn(self) -> np.ndarray:
        nu = self.normals
        return np.einsum("ni,nij,nj->n", nu, self.jet.hessian, nu)

    @property
    def tilde_laplacian(self) -> np.ndarray:
        return self.laplacian - self.hess_nn

    @property
    def boundary_g(self) -> np.ndarray:
        """g(n, nu) at each boundary element."""
        grad = self.boundary_jet.gradient
        norm = np.linalg.norm(grad, axis=1)
        return np.sum(self.boundary_normals * grad, axis=1) / norm

    @property
    def boundary_grad_norm(self) -> np.ndarray:
        """|d(f restricted to the boundary)|."""
        grad = self.boundary_jet.gradient
        normal_part = np.sum(self.boundary_normals * grad, axis=1, keepdims=True)
        return np.linalg.norm(grad - normal_part * self.boundary_normals, axis=1)


def field_scale(values: np.ndarray) -> float:
    scale = float(np.max(np.abs(values))) if len(values) else 0.0
    return scale if scale > 0 else 1.0


def _project(
    f: FieldFunction,
    points: np.ndarray,
    domain: Domain,
    scale: float,
    settings: Settings,
    face_normals: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Newton steps along the gradient until |f| <= projection_tol * scale. With
    face normals the step stays inside the face.
    """
    x = points.copy()
    if len(x) == 0:
        return x
    tol = settings.projection_tol * scale
    for _ in range(settings.projection_max_iter):
        jet = intrinsic_jet(f, x, domain)
        active = np.abs(jet.value) > tol
        if not active.any():
            break
        grad = jet.gradient
        if face_normals is not None:
            grad = grad - np.sum(grad * face_normals, axis=1, keepdims=True) * face_normals
        g2 = np.sum(grad**2, axis=1)
        safe = active & (g2 > 0)
        step = np.where(safe, jet.value / np.where(g2 > 0, g2, 1.0), 0.0)
        x = x - step[:, None] * grad
        if domain.is_sphere:
            x = x / np.linalg.norm(x, axis=1, keepdims=True)
    residual = np.abs(f.evaluate(x))
    if np.any(residual > tol):
        worst = float(residual.max())
        logger.error(f"Projection onto Z stalled, residual {worst:.3e}")
        raise RegularityViolation(
            f"projection onto Z stalled with |f| = {worst:.3e} > {tol:.3e}",
            "nodal",
            "extract_nodal_set",
        )
    return domain.wrap(x) if domain.is_periodic else x


def _element_geometry(
    domain: Domain, vertices: np.ndarray, cells: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Centroids and measures of segments or triangles."""
    if len(cells) == 0:
        return np.zeros((0, vertices.shape[1])), np.zeros(0)
    a = vertices[cells[:, 0]]
    b = vertices[cells[:, 1]]
    if cells.shape[1] == 2:
        if domain.is_sphere:
            cross = np.linalg.norm(np.cross(a, b), axis=1)
            weights = np.arctan2(cross, np.sum(a * b, axis=1))
            mid = a + b
            return mid / np.linalg.norm(mid, axis=1, keepdims=True), weights
        d = domain.displacement(a, b)
        return domain.wrap(a + 0.5 * d), np.linalg.norm(d, axis=1)
    c = vertices[cells[:, 2]]
    d1 = domain.displacement(a, b)
    d2 = domain.displacement(a, c)
    weights = 0.5 * np.linalg.norm(np.cross(d1, d2), axis=1)
    return domain.wrap(a + (d1 + d2) / 3.0), weights


def _cell_graph(n_vertices: int, cells: np.ndarray) -> sparse.coo_matrix:
    if cells.shape[1] == 1 or len(cells) == 0:
        rows = cols = np.zeros(0, dtype=np.int64)
    else:
        rows = np.concatenate([cells[:, i] for i in range(cells.shape[1] - 1)])
        cols = np.concatenate([cells[:, i + 1] for i in range(cells.shape[1] - 1)])
    data = np.ones(len(rows))
    return sparse.coo_matrix((data, (rows, cols)), shape=(n_vertices, n_vertices))


def _components(n_vertices: int, cells: np.ndarray) -> np.ndarray:
    """Connected-component label per vertex of the graph spanned by cells."""
    if n_vertices == 0:
        return np.zeros(0, dtype=np.int64)
    _, labels = csgraph.connected_components(
        _cell_graph(n_vertices, cells), directed=False
    )
    return labels


def extract_nodal_set(
    f: FieldFunction,
    domain: Domain,
    chart: GridChart,
    settings: Optional[Settings] = None,
) -> NodalSet:
    settings = settings or get_settings()
    values = f.evaluate(chart.nodes())
    scale = field_scale(values)
    prims = march(f, domain, chart, values, settings.bisection_steps)

    centroids, weights = _element_geometry(domain, prims.vertices, prims.cells)
    keep = weights > 0

    # Zero-length elements are dropped but still glue their vertices together.
    n_vertices = len(prims.vertices)
    representative = _components(n_vertices, prims.cells[~keep])
    cells = representative[prims.cells]

    vertex_labels = _components(n_vertices, prims.cells)
    n_components = int(len(np.unique(vertex_labels[prims.cells]))) if len(prims.cells) else 0

    points = _project(f, centroids[keep], domain, scale, settings)
    jet = intrinsic_jet(f, points, domain)
    grad_norm = np.linalg.norm(jet.gradient, axis=1)
    floor = settings.regularity_floor * scale
    if len(grad_norm) and grad_norm.min() < floor:
        logger.error(f"Regularity floor violated: min |df| = {grad_norm.min():.3e}")
        raise RegularityViolation(
            f"|df| = {grad_norm.min():.3e} below floor {floor:.3e} on Z",
            "nodal",
            "extract_nodal_set",
        )

    b_points, b_weights, b_normals = _boundary_elements(f, domain, prims, scale, settings)
    b_jet = intrinsic_jet(f, b_points, domain)
    if len(b_points):
        grad = b_jet.gradient
        tangential = grad - np.sum(grad * b_normals, axis=1, keepdims=True) * b_normals
        restricted = np.linalg.norm(tangential, axis=1)
        if restricted.min() < floor:
            logger.error(
                f"Boundary regularity floor violated: min |d(f|dM)| = {restricted.min():.3e}"
            )
            raise RegularityViolation(
                f"|d(f|dM)| = {restricted.min():.3e} below floor {floor:.3e} on dZ",
                "nodal",
                "extract_nodal_set",
            )

    nodal = NodalSet(
        domain=domain,
        dims=domain.dims,
        scale=scale,
        points=points,
        weights=weights[keep],
        jet=jet,
        cells=cells[keep],
        vertices=prims.vertices,
        labels=vertex_labels[prims.cells[keep, 0]] if keep.any() else np.zeros(0, dtype=np.int64),
        n_components=n_components,
        boundary_points=b_points,
        boundary_weights=b_weights,
        boundary_normals=b_normals,
        boundary_jet=b_jet,
    )
    logger.debug(
        f"Extracted {len(nodal)} elements, {n_components} components, "
        f"{len(b_points)} boundary elements"
    )
    return nodal


def _boundary_elements(
    f: FieldFunction, domain: Domain, prims, scale: float, settings: Settings
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cells = prims.boundary_cells
    if len(cells) == 0:
        dim = domain.ambient_dim
        return np.zeros((0, dim)), np.zeros(0), np.zeros((0, dim))
    if cells.shape[1] == 1:
        points = prims.boundary_vertices[cells[:, 0]]
        return points, np.ones(len(points)), prims.boundary_normals
    a = prims.boundary_vertices[cells[:, 0]]
    b = prims.boundary_vertices[cells[:, 1]]
    weights = np.linalg.norm(b - a, axis=1)
    keep = weights > 0
    normals = prims.boundary_normals[keep]
    points = _project(f, 0.5 * (a + b)[keep], domain, scale, settings, face_normals=normals)
    return points, weights[keep], normals


def nodal_volume(nodal: NodalSet) -> float:
    return float(nodal.weights.sum()) if len(nodal) else 0.0


def component_count(nodal: NodalSet) -> int:
    return nodal.n_components


def integrate_over_nodal(
    nodal: NodalSet, integrand: Callable[[np.ndarray, Jet], np.ndarray]
) -> float:
    """Sum of integrand(point, jet) * weight over the elements."""
    if len(nodal) == 0:
        return 0.0
    values = np.broadcast_to(
        np.asarray(integrand(nodal.points, nodal.jet), dtype=float), nodal.weights.shape
    )
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        logger.error(f"Integrand not finite on {bad} elements")
        raise IntegrandFailure(
            f"integrand is not finite on {bad} of {len(values)} elements",
            "nodal",
            "integrate_over_nodal",
        )
    return float(values @ nodal.weights)


def mean_curvature(nodal: NodalSet) -> np.ndarray:
    """tilde-Laplacian / |df| per element."""
    return nodal.tilde_laplacian / nodal.grad_norm


ELEMENT_COLUMNS = ("weight", "grad_norm", "laplacian", "hess_nn", "mean_curvature")


def element_table(nodal: NodalSet) -> tuple[list[str], np.ndarray]:
    """Column names and one row per element for CSV export."""
    coords = [f"x{i}" for i in range(nodal.domain.ambient_dim)]
    if len(nodal) == 0:
        return coords + list(ELEMENT_COLUMNS), np.zeros((0, len(coords) + len(ELEMENT_COLUMNS)))
    rows = np.column_stack(
        [
            nodal.points,
            nodal.weights,
            nodal.grad_norm,
            nodal.laplacian,
            nodal.hess_nn,
            mean_curvature(nodal),
        ]
    )
    return coords + list(ELEMENT_COLUMNS), rows
