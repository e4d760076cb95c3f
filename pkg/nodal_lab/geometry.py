import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import trimesh

from nodal_lab.errors import DomainError
from nodal_lab.logger import logger

MAX_SPHERE_LEVEL = 7


class DomainKind(str, enum.Enum):
    FLAT_TORUS = "FlatTorus"
    RECTANGLE = "Rectangle"
    SPHERE2 = "Sphere2"


@dataclass(frozen=True, eq=False)
class SphereMesh:
    """Subdivided icosahedron with unit-norm vertices."""

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    face_edges: np.ndarray
    vertex_areas: np.ndarray

    @property
    def area(self) -> float:
        return float(self.vertex_areas.sum())

    @property
    def mean_edge_length(self) -> float:
        a = self.vertices[self.edges[:, 0]]
        b = self.vertices[self.edges[:, 1]]
        return float(np.mean(np.linalg.norm(a - b, axis=1)))


@dataclass(frozen=True)
class BoundaryFace:
    axis: int
    side: int
    value: float
    normal: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Domain:
    kind: DomainKind
    dims: int
    extents: tuple[float, ...]
    origin: tuple[float, ...]
    mesh: Optional[SphereMesh] = None

    @property
    def ambient_dim(self) -> int:
        return 3 if self.kind == DomainKind.SPHERE2 else self.dims

    @property
    def is_sphere(self) -> bool:
        return self.kind == DomainKind.SPHERE2

    @property
    def is_periodic(self) -> bool:
        return self.kind == DomainKind.FLAT_TORUS

    @property
    def has_boundary(self) -> bool:
        return self.kind == DomainKind.RECTANGLE

    @property
    def volume(self) -> float:
        if self.is_sphere:
            return self.mesh.area
        return float(np.prod(self.extents))

    @property
    def analytic_volume(self) -> float:
        if self.is_sphere:
            return 4.0 * math.pi
        return float(np.prod(self.extents))

    @property
    def boundary_volume(self) -> float:
        """H^{m-1} measure of the boundary (perimeter or surface area)."""
        if not self.has_boundary:
            return 0.0
        total = 0.0
        for face in self.boundary_faces():
            others = [e for i, e in enumerate(self.extents) if i != face.axis]
            total += float(np.prod(others))
        return total

    def boundary_faces(self) -> list[BoundaryFace]:
        if not self.has_boundary:
            return []
        faces = []
        for axis in range(self.dims):
            for side in (0, 1):
                normal = [0.0] * self.dims
                normal[axis] = 1.0 if side else -1.0
                value = self.origin[axis] + side * self.extents[axis]
                faces.append(BoundaryFace(axis, side, value, tuple(normal)))
        return faces

    def wrap(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.is_periodic:
            origin = np.asarray(self.origin)
            period = np.asarray(self.extents)
            return origin + np.mod(points - origin, period)
        if self.is_sphere:
            return points / np.linalg.norm(points, axis=-1, keepdims=True)
        return points

    def displacement(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """q - p, using the minimal image on the torus."""
        d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
        if self.is_periodic:
            period = np.asarray(self.extents)
            d = d - period * np.round(d / period)
        return d

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.is_sphere:
            return np.abs(np.linalg.norm(points, axis=1) - 1.0) <= 1e-9
        if self.is_periodic:
            return np.ones(len(points), dtype=bool)
        lo = np.asarray(self.origin) - tol
        hi = np.asarray(self.origin) + np.asarray(self.extents) + tol
        return np.all((points >= lo) & (points <= hi), axis=1)


@dataclass(frozen=True, eq=False)
class GridChart:
    """
    Lattice chart of a flat domain, or the vertex set of the sphere mesh.
    On the sphere `resolution` is the icosphere subdivision level.
    """

    resolution: int
    spacing: tuple[float, ...]
    axes: tuple[np.ndarray, ...]
    periodic: bool
    vertices: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        if self.vertices is not None:
            return (len(self.vertices),)
        return tuple(len(a) for a in self.axes)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_size(self) -> float:
        return float(max(self.spacing))

    def nodes(self) -> np.ndarray:
        if self.vertices is not None:
            return self.vertices
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)


def icosphere(level: int) -> SphereMesh:
    mesh = trimesh.creation.icosphere(subdivisions=level, radius=1.0)
    vertices = np.asarray(mesh.vertices, dtype=float)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    # columns follow the face edges (a, b), (b, c), (c, a)
    face_edges = np.asarray(mesh.faces_unique_edges, dtype=np.int64)
    vertex_areas = np.zeros(len(vertices))
    for column in range(3):
        np.add.at(vertex_areas, faces[:, column], mesh.area_faces / 3.0)
    return SphereMesh(
        level, vertices, faces, np.asarray(mesh.edges_unique, dtype=np.int64), face_edges, vertex_areas
    )


def make_domain(
    kind: DomainKind | str,
    dims: int = 2,
    extents: Optional[Sequence[float]] = None,
    resolution: int = 128,
    origin: Optional[Sequence[float]] = None,
) -> tuple[Domain, GridChart]:
    """
    Builds a domain and its grid chart. Flat domains take `resolution`
    cells per axis; Sphere2 takes it as the icosphere subdivision level.
    """
    kind = DomainKind(kind)
    if dims not in (2, 3):
        raise DomainError(f"dims must be 2 or 3, got {dims}", "geometry", "make_domain")

    if kind == DomainKind.SPHERE2:
        if dims != 2:
            raise DomainError("Sphere2 is two-dimensional", "geometry", "make_domain")
        if not 0 <= resolution <= MAX_SPHERE_LEVEL:
            raise DomainError(
                f"sphere mesh level must be in [0, {MAX_SPHERE_LEVEL}], got {resolution}",
                "geometry",
                "make_domain",
            )
        mesh = icosphere(resolution)
        domain = Domain(kind, 2, (), (0.0, 0.0, 0.0), mesh)
        chart = GridChart(
            resolution=resolution,
            spacing=(mesh.mean_edge_length,),
            axes=(),
            periodic=False,
            vertices=mesh.vertices,
        )
        logger.debug(
            f"Sphere mesh level {resolution}: {len(mesh.vertices)} vertices, "
            f"area {mesh.area:.8f}"
        )
        return domain, chart

    if extents is None:
        extents = [1.0] * dims
    extents = tuple(float(e) for e in extents)
    if len(extents) != dims:
        raise DomainError(
            f"expected {dims} extents, got {len(extents)}", "geometry", "make_domain"
        )
    if any(not e > 0 for e in extents):
        raise DomainError("extents must be positive", "geometry", "make_domain")
    if resolution < 8:
        raise DomainError(
            f"resolution must be at least 8, got {resolution}", "geometry", "make_domain"
        )
    origin = tuple(float(o) for o in origin) if origin is not None else (0.0,) * dims
    if len(origin) != dims:
        raise DomainError(
            f"expected {dims} origin coordinates", "geometry", "make_domain"
        )

    spacing = tuple(e / resolution for e in extents)
    periodic = kind == DomainKind.FLAT_TORUS
    n_nodes = resolution if periodic else resolution + 1
    axes = tuple(o + h * np.arange(n_nodes) for o, h in zip(origin, spacing))
    domain = Domain(kind, dims, extents, origin)
    chart = GridChart(resolution, spacing, axes, periodic)
    return domain, chart


def rechart(domain: Domain, resolution: int) -> tuple[Domain, GridChart]:
    """Same domain at another resolution."""
    if domain.is_sphere:
        return make_domain(domain.kind, 2, None, resolution)
    return make_domain(
        domain.kind, domain.dims, domain.extents, resolution, domain.origin
    )


def geodesic_distance(domain: Domain, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if domain.is_sphere:
        cross = np.linalg.norm(np.cross(p, q), axis=-1)
        dot = np.sum(p * q, axis=-1)
        return np.arctan2(cross, dot)
    return np.linalg.norm(domain.displacement(p, q), axis=-1)


def tangent_frame(domain: Domain, p: np.ndarray) -> np.ndarray:
    """Orthonormal basis of T_pM as columns of an (ambient x m) matrix."""
    if not domain.is_sphere:
        return np.eye(domain.dims)
    p = np.asarray(p, dtype=float)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(p)))] = 1.0
    e1 = a - np.dot(a, p) * p
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p, e1)
    return np.stack([e1, e2], axis=1)


def tangent_frames(domain: Domain, points: np.ndarray) -> np.ndarray:
    """Batched tangent_frame: (N, ambient, m)."""
    points = np.atleast_2d(points)
    if not domain.is_sphere:
        return np.broadcast_to(np.eye(domain.dims), (len(points), domain.dims, domain.dims))
    helper = np.zeros_like(points)
    helper[np.arange(len(points)), np.argmin(np.abs(points), axis=1)] = 1.0
    e1 = helper - np.sum(helper * points, axis=1, keepdims=True) * points
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(points, e1)
    return np.stack([e1, e2], axis=2)


def tangent_projector(domain: Domain, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    eye = np.eye(domain.ambient_dim)
    if not domain.is_sphere:
        return np.broadcast_to(eye, (len(points),) + eye.shape)
    return eye - points[:, :, None] * points[:, None, :]


def exp_map(domain: Domain, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if domain.is_sphere:
        theta = np.linalg.norm(v)
        if theta == 0.0:
            return p.copy()
        return np.cos(theta) * p + np.sin(theta) * v / theta
    return domain.wrap(p + v)


def random_points(domain: Domain, n: int, rng: np.random.Generator) -> np.ndarray:
    if domain.is_sphere:
        x = rng.standard_normal((n, 3))
        return x / np.linalg.norm(x, axis=1, keepdims=True)
    u = rng.random((n, domain.dims))
    return np.asarray(domain.origin) + u * np.asarray(domain.extents)


def random_tangents(
    domain: Domain, points: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Unit tangent vectors at each point."""
    v = rng.standard_normal(points.shape)
    if domain.is_sphere:
        v = v - np.sum(v * points, axis=1, keepdims=True) * points
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def quadrature(domain: Domain, chart: GridChart) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights whose sum is the domain volume."""
    nodes = chart.nodes()
    if domain.is_sphere:
        return nodes, domain.mesh.vertex_areas.copy()
    if domain.is_periodic:
        weights = np.full(len(nodes), float(np.prod(chart.spacing)))
        return nodes, weights
    per_axis = []
    for axis, h in zip(chart.axes, chart.spacing):
        w = np.full(len(axis), h)
        w[0] = w[-1] = 0.5 * h
        per_axis.append(w)
    grids = np.meshgrid(*per_axis, indexing="ij")
    weights = np.prod(np.stack([g.reshape(-1) for g in grids], axis=1), axis=1)
    return nodes, weights


def boundary_quadrature(
    domain: Domain, chart: GridChart
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Midpoint nodes on the open faces of a Rectangle, with weights and
    outward normals. Corners and edges of faces are never sampled.
    """
    if not domain.has_boundary:
        empty = np.zeros((0, domain.ambient_dim))
        return empty, np.zeros(0), empty
    points, weights, normals = [], [], []
    for face in domain.boundary_faces():
        centres = []
        for axis in range(domain.dims):
            if axis == face.axis:
                continue
            h = chart.spacing[axis]
            centres.append(domain.origin[axis] + h * (np.arange(chart.resolution) + 0.5))
        grids = np.meshgrid(*centres, indexing="ij")
        flat = [g.reshape(-1) for g in grids]
        cols = []
        it = iter(flat)
        for axis in range(domain.dims):
            cols.append(np.full(len(flat[0]), face.value) if axis == face.axis else next(it))
        pts = np.stack(cols, axis=1)
        cell = float(np.prod([chart.spacing[a] for a in range(domain.dims) if a != face.axis]))
        points.append(pts)
        weights.append(np.full(len(pts), cell))
        normals.append(np.tile(face.normal, (len(pts), 1)))
    return np.vstack(points), np.concatenate(weights), np.vstack(normals)
