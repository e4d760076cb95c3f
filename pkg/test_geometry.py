import math

import numpy as np
import pytest

from nodal_lab.errors import DomainError
from nodal_lab.geometry import (
    boundary_quadrature,
    exp_map,
    geodesic_distance,
    make_domain,
    quadrature,
    random_points,
)


def test_unit_torus_has_area_one():
    domain, chart = make_domain("FlatTorus", 2, [1.0, 1.0], 64)
    _, weights = quadrature(domain, chart)
    assert domain.volume == 1.0
    assert abs(weights.sum() - 1.0) <= 1e-10
    assert chart.spacing == (1 / 64, 1 / 64)
    assert chart.node_count == 64 * 64


def test_unit_cube_boundary_area():
    domain, chart = make_domain("Rectangle", 3, [1.0, 1.0, 1.0], 32)
    assert domain.boundary_volume == 6.0
    assert len(domain.boundary_faces()) == 6
    _, weights = quadrature(domain, chart)
    assert abs(weights.sum() - 1.0) <= 1e-10
    # rectangle charts include the boundary nodes
    assert chart.shape == (33, 33, 33)


def test_rectangle_face_quadrature_covers_perimeter():
    domain, chart = make_domain("Rectangle", 2, [2.0, 1.0], 16)
    nodes, weights, normals = boundary_quadrature(domain, chart)
    assert abs(weights.sum() - 6.0) <= 1e-12
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)


def test_sphere_mesh_area():
    domain, _ = make_domain("Sphere2", 2, None, 5)
    assert abs(domain.volume - 4 * math.pi) / (4 * math.pi) <= 1e-3
    assert np.allclose(np.linalg.norm(domain.mesh.vertices, axis=1), 1.0)


@pytest.mark.parametrize("level", [0, 1, 3])
def test_icosphere_counts(level):
    domain, chart = make_domain("Sphere2", 2, None, level)
    mesh = domain.mesh
    assert len(mesh.vertices) == 10 * 4**level + 2
    assert len(mesh.faces) == 20 * 4**level
    assert len(mesh.edges) == 30 * 4**level
    assert mesh.face_edges.shape == (len(mesh.faces), 3)
    assert chart.node_count == len(mesh.vertices)


def test_sphere_quadrature_of_one_converges():
    errors = []
    for level in range(2, 6):
        domain, chart = make_domain("Sphere2", 2, None, level)
        _, weights = quadrature(domain, chart)
        assert np.all(weights > 0)
        assert weights.sum() == pytest.approx(domain.mesh.area, rel=1e-12)
        errors.append(4 * math.pi - weights.sum())
    assert all(e > 0 for e in errors)
    for coarse, fine in zip(errors, errors[1:]):
        assert fine / coarse == pytest.approx(0.25, abs=0.05)

@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "Sphere2", "dims": 3},
        {"kind": "FlatTorus", "dims": 2, "extents": [1.0, -1.0]},
        {"kind": "Rectangle", "dims": 2, "extents": [1.0, 0.0]},
        {"kind": "FlatTorus", "dims": 2, "resolution": 4},
        {"kind": "FlatTorus", "dims": 4},
    ],
)
def test_invalid_domains_are_rejected(kwargs):
    with pytest.raises(DomainError):
        make_domain(**kwargs)


def test_torus_distance_uses_minimal_image():
    domain, _ = make_domain("FlatTorus", 2, [1.0, 1.0], 16)
    assert geodesic_distance(domain, [0.1, 0.0], [0.9, 0.0]) == pytest.approx(0.2)


def test_rectangle_distance_is_euclidean():
    domain, _ = make_domain("Rectangle", 2, [1.0, 1.0], 16)
    assert geodesic_distance(domain, [0.1, 0.2], [0.4, 0.6]) == pytest.approx(0.5)


def test_sphere_distance_pole_to_equator():
    domain, _ = make_domain("Sphere2", 2, None, 2)
    d = geodesic_distance(domain, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    assert d == pytest.approx(math.pi / 2)


@pytest.mark.parametrize(
    "kind,dims,tol",
    [("FlatTorus", 2, 1e-12), ("Rectangle", 3, 1e-12), ("Sphere2", 2, 1e-9)],
)
def test_triangle_inequality(kind, dims, tol, rng):
    domain, _ = make_domain(kind, dims, None, 2 if kind == "Sphere2" else 16)
    p, q, r = (random_points(domain, 1000, rng) for _ in range(3))
    pq = geodesic_distance(domain, p, q)
    qr = geodesic_distance(domain, q, r)
    pr = geodesic_distance(domain, p, r)
    assert np.all(pr <= pq + qr + tol)
    assert np.all(pq >= 0)
    assert np.allclose(pq, geodesic_distance(domain, q, p))


def test_exp_map_on_sphere_moves_by_arc_length():
    domain, _ = make_domain("Sphere2", 2, None, 2)
    p = np.array([0.0, 0.0, 1.0])
    q = exp_map(domain, p, np.array([0.3, 0.0, 0.0]))
    assert np.linalg.norm(q) == pytest.approx(1.0)
    assert geodesic_distance(domain, p, q) == pytest.approx(0.3)
