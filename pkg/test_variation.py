import math

import numpy as np
import pytest

from nodal_lab.errors import NotMinimal
from nodal_lab.fields import ConstantField, PlaneWaveField, PolynomialField, sample_field, sphere_level_field
from nodal_lab.geometry import make_domain
from nodal_lab.nodal import extract_nodal_set
from nodal_lab.variation import (
    cm_norm_sq,
    fd_first_variation,
    fd_second_variation,
    first_variation,
    second_variation_minimal,
)


@pytest.fixture
def big_square():
    return make_domain("Rectangle", 2, [4.0, 4.0], 256, [-2.0, -2.0])


@pytest.fixture
def unit_circle():
    return sphere_level_field([0.0131, -0.0077], 1.0)


@pytest.fixture
def lines():
    return PlaneWaveField.sine([2 * math.pi, 0.0], phase=0.3)


def test_shrinking_circle(big_square, unit_circle):
    domain, chart = big_square
    report = first_variation(unit_circle, ConstantField(1.0), domain, chart)
    assert report.interior_term > 0
    assert report.total < 0
    assert report.boundary_term == 0.0
    assert report.total == report.boundary_term - report.interior_term
    assert abs(report.total + math.pi) <= 1e-3


def test_geodesic_lines_have_zero_first_variation(torus, lines):
    domain, chart = torus
    report = first_variation(lines, PlaneWaveField.cosine([0.0, 2 * math.pi]), domain, chart)
    assert abs(report.total) <= 1e-8
    assert report.boundary_term == 0.0


def test_orthogonal_boundary_crossing_has_no_boundary_term():
    domain, chart = make_domain("Rectangle", 2, [1.0, 1.0], 64)
    f = PolynomialField([[1, 0], [0, 0]], [1.0, -0.3013])
    report = first_variation(f, PlaneWaveField.cosine([0.0, 3.0]), domain, chart)
    assert abs(report.boundary_term) <= 1e-12


def test_first_variation_is_linear_in_the_direction(arithmetic_wave, torus):
    domain, chart = torus
    f = sample_field(arithmetic_wave, 21)
    nodal = extract_nodal_set(f, domain, chart)
    h1 = sample_field(arithmetic_wave, 22)
    h2 = sample_field(arithmetic_wave, 23)
    a, b = 1.7, -0.4
    combined = first_variation(f, a * h1 + b * h2, domain, chart, nodal).total
    parts = (
        a * first_variation(f, h1, domain, chart, nodal).total
        + b * first_variation(f, h2, domain, chart, nodal).total
    )
    assert combined == pytest.approx(parts, rel=1e-10, abs=1e-12)


def test_finite_difference_oracle_on_the_circle(unit_circle):
    domain, chart = make_domain("Rectangle", 2, [4.0, 4.0], 128, [-2.0, -2.0])
    oracle = fd_first_variation(unit_circle, ConstantField(1.0), 1e-3, domain, chart)
    assert abs(oracle + math.pi) <= 1e-2
    doubled = fd_first_variation(unit_circle, ConstantField(2.0), 5e-4, domain, chart)
    assert doubled == pytest.approx(2 * oracle, rel=1e-6)


def test_finite_difference_oracle_on_geodesic_lines(torus, lines):
    domain, chart = torus
    oracle = fd_first_variation(lines, PlaneWaveField.cosine([0.0, 2 * math.pi]), None, domain, chart)
    assert abs(oracle) <= 1e-4


@pytest.mark.slow
def test_first_variation_agrees_with_finite_differences(arithmetic_wave):
    domain, chart = make_domain("FlatTorus", 2, [1.0, 1.0], 256)
    for seed in range(50):
        f = sample_field(arithmetic_wave, 1000 + seed)
        h = sample_field(arithmetic_wave, 2000 + seed)
        total = first_variation(f, h, domain, chart).total
        oracle = fd_first_variation(f, h, None, domain, chart)
        assert abs(total - oracle) <= 5e-3 * (1 + abs(total))


@pytest.mark.slow
def test_circle_oracle_at_high_resolution(unit_circle):
    domain, chart = make_domain("Rectangle", 2, [4.0, 4.0], 512, [-2.0, -2.0])
    assert abs(first_variation(unit_circle, ConstantField(1.0), domain, chart).total + math.pi) <= 1e-3
    assert abs(fd_first_variation(unit_circle, ConstantField(1.0), 1e-3, domain, chart) + math.pi) <= 1e-3


def test_cm_norm_matches_basis_expansion(arithmetic_wave, torus):
    domain, chart = torus
    for seed in range(20):
        f = sample_field(arithmetic_wave, seed)
        nodal = extract_nodal_set(f, domain, chart)
        expected = sum(
            first_variation(f, arithmetic_wave.basis_element(n), domain, chart, nodal).total ** 2
            for n in range(arithmetic_wave.rank)
        )
        value = cm_norm_sq(f, arithmetic_wave, domain, chart, nodal)
        assert value == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_cm_norm_is_linear_in_the_kernel(arithmetic_wave, torus):
    domain, chart = torus
    f = sample_field(arithmetic_wave, 8)
    nodal = extract_nodal_set(f, domain, chart)
    base = cm_norm_sq(f, arithmetic_wave, domain, chart, nodal)
    scaled = cm_norm_sq(f, arithmetic_wave.scaled(4.0), domain, chart, nodal)
    assert scaled == pytest.approx(4.0 * base, rel=1e-12)


def test_cm_norm_of_empty_nodal_set(arithmetic_wave, torus):
    domain, chart = torus
    f = ConstantField(1.0) + 0.5 * sample_field(arithmetic_wave, 1) * 0.1
    assert cm_norm_sq(f, arithmetic_wave, domain, chart) == 0.0


def test_second_variation_of_straight_lines(lines):
    domain, chart = make_domain("FlatTorus", 2, [1.0, 1.0], 128)
    h = PlaneWaveField.sine([0.0, 2 * math.pi], amplitude=2 * math.pi)
    value = second_variation_minimal(lines, h, domain, chart)
    assert value == pytest.approx(4 * math.pi**2, rel=1e-2)
    assert abs(second_variation_minimal(lines, ConstantField(1.0), domain, chart)) <= 1e-8


def test_second_variation_matches_finite_differences(lines):
    domain, chart = make_domain("FlatTorus", 2, [1.0, 1.0], 128)
    h = PlaneWaveField.sine([0.0, 2 * math.pi], amplitude=2 * math.pi)
    formula = second_variation_minimal(lines, h, domain, chart)
    oracle = fd_second_variation(lines, h, 1e-2, domain, chart)
    assert oracle == pytest.approx(formula, rel=1e-2)


def test_second_variation_requires_a_minimal_nodal_set(big_square, unit_circle):
    domain, chart = big_square
    with pytest.raises(NotMinimal):
        second_variation_minimal(unit_circle, ConstantField(1.0), domain, chart)
