import math

import numpy as np
import pytest

from nodal_lab.errors import IntegrandFailure, RegularityViolation
from nodal_lab.fields import PlaneWaveField, PolynomialField, sample_field, sphere_level_field
from nodal_lab.geometry import make_domain
from nodal_lab.nodal import (
    component_count,
    element_table,
    extract_nodal_set,
    integrate_over_nodal,
    mean_curvature,
    nodal_volume,
)

# centre kept off the lattice so no node lies on Z
CENTRE = [0.0123, -0.0171]


def circle(radius=0.5):
    return sphere_level_field(CENTRE, radius)


def test_circle_volume_and_topology(square):
    domain, chart = square
    nodal = extract_nodal_set(circle(), domain, chart)
    assert abs(nodal_volume(nodal) - math.pi) <= 1e-3
    assert component_count(nodal) == 1
    assert len(nodal.boundary_weights) == 0
    assert np.all(nodal.weights > 0)
    assert np.max(np.abs(circle().evaluate(nodal.points))) <= 1e-9 * nodal.scale


def test_straight_lines_on_torus(torus):
    domain, chart = torus
    f = PlaneWaveField.sine([2 * math.pi, 0.0], phase=0.3)
    nodal = extract_nodal_set(f, domain, chart)
    assert nodal_volume(nodal) == pytest.approx(2.0, rel=1e-10)
    assert component_count(nodal) == 2


def test_great_circle_on_sphere(sphere):
    domain, chart = sphere
    a = np.array([0.3, -0.5, 0.81])
    f = PolynomialField(np.eye(3, dtype=int), a / np.linalg.norm(a))
    nodal = extract_nodal_set(f, domain, chart)
    assert abs(nodal_volume(nodal) - 2 * math.pi) <= 5e-3 * 2 * math.pi
    assert component_count(nodal) == 1


def test_linear_field_sample_on_sphere(linear_field, sphere):
    domain, chart = sphere
    nodal = extract_nodal_set(sample_field(linear_field, 4), domain, chart)
    assert abs(nodal_volume(nodal) - 2 * math.pi) <= 5e-3 * 2 * math.pi


def test_empty_nodal_set(square):
    domain, chart = square
    f = sphere_level_field([0.0, 0.0], 1.0) + 2.0
    nodal = extract_nodal_set(f, domain, chart)
    assert len(nodal) == 0
    assert nodal_volume(nodal) == 0.0
    assert component_count(nodal) == 0


def test_scale_and_sign_invariance(square):
    domain, chart = square
    f = circle()
    v = nodal_volume(extract_nodal_set(f, domain, chart))
    assert nodal_volume(extract_nodal_set(3.0 * f, domain, chart)) == pytest.approx(v, rel=1e-12)
    assert nodal_volume(extract_nodal_set(-f, domain, chart)) == pytest.approx(v, rel=1e-10)


def test_components_of_perturbed_product(torus):
    domain, chart = torus
    f = PlaneWaveField.sine([2 * math.pi, 0.0]) * PlaneWaveField.sine([0.0, 2 * math.pi]) + 0.1
    nodal = extract_nodal_set(f, domain, chart)
    # one connected positive region and two negative islands
    assert component_count(nodal) == 2


def test_integrals_over_the_unit_circle():
    domain, chart = make_domain("Rectangle", 2, [4.0, 4.0], 256, [-2.0, -2.0])
    f = sphere_level_field([0.0, 0.0], 1.0)
    nodal = extract_nodal_set(f, domain, chart)
    volume = nodal_volume(nodal)

    assert integrate_over_nodal(nodal, lambda p, jet: 1.0) == pytest.approx(volume)
    assert integrate_over_nodal(
        nodal, lambda p, jet: np.linalg.norm(jet.gradient, axis=1) ** -1 * np.linalg.norm(jet.gradient, axis=1)
    ) == pytest.approx(volume)
    assert abs(integrate_over_nodal(nodal, lambda p, jet: nodal.tilde_laplacian / nodal.grad_norm**2) - math.pi) <= 1e-3
    assert np.allclose(mean_curvature(nodal), 1.0)


def test_non_finite_integrand_is_reported(square):
    domain, chart = square
    nodal = extract_nodal_set(circle(), domain, chart)
    with pytest.raises(IntegrandFailure):
        integrate_over_nodal(nodal, lambda p, jet: np.full(len(p), np.nan))


def test_degenerate_zero_set_violates_regularity(square):
    domain, chart = square
    # (x - 0.3)^3 vanishes to third order on its zero set
    f = PolynomialField([[3, 0], [2, 0], [1, 0], [0, 0]], [1.0, -0.9, 0.27, -0.027])
    with pytest.raises(RegularityViolation):
        extract_nodal_set(f, domain, chart)


def test_random_samples_pass_the_regularity_guard(arithmetic_wave, torus):
    domain, chart = torus
    for seed in range(100):
        extract_nodal_set(sample_field(arithmetic_wave, seed), domain, chart)


def test_element_table(square):
    domain, chart = square
    nodal = extract_nodal_set(circle(), domain, chart)
    columns, rows = element_table(nodal)
    assert columns[:2] == ["x0", "x1"]
    assert rows.shape == (len(nodal), len(columns))
    assert np.allclose(rows[:, columns.index("mean_curvature")], 2.0)


@pytest.mark.slow
def test_circle_volume_converges_at_second_order():
    errors = []
    for resolution in (64, 128, 256, 512):
        domain, chart = make_domain("Rectangle", 2, [2.0, 2.0], resolution, [-1.0, -1.0])
        errors.append(abs(nodal_volume(extract_nodal_set(circle(), domain, chart)) - math.pi))
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    assert all(3.2 <= r <= 4.8 for r in ratios)
