import math

import numpy as np
import pytest

from nodal_lab.covariance.factory import build_model
from nodal_lab.errors import DegenerateConditioning, ModelError
from nodal_lab.geometry import make_domain
from nodal_lab.kacrice import (
    GaussianVector,
    _boundary_terms,
    classify_refinement,
    condition,
    derivative_norm_sq_expectation,
    expected_volume,
    near_diagonal_diagnostic,
    second_moment,
    two_point_density,
)
from nodal_lab.law import run_ensemble
from nodal_lab.schemas import DivergenceReport, KacRiceReport


def test_conditioning_leaves_independent_block_alone():
    cov = np.diag([1.0, 2.0, 3.0])
    out = GaussianVector(cov).condition([0])
    assert np.allclose(out.covariance[1:, 1:], cov[1:, 1:])
    assert np.allclose(out.mean, 0.0)


def test_conditioning_on_correlated_coordinate():
    rho = 0.6
    out = condition(GaussianVector(np.array([[1.0, rho], [rho, 1.0]])), [0], [0.5])
    assert out.covariance[1, 1] == pytest.approx(1 - rho**2)
    assert out.mean[1] == pytest.approx(rho * 0.5)
    assert out.mean[0] == 0.5


def test_conditioning_twice_is_a_noop(rng):
    a = rng.standard_normal((4, 4))
    joint = GaussianVector(a @ a.T + np.eye(4))
    once = joint.condition([1, 2])
    twice = once.condition([1, 2])
    assert np.array_equal(once.covariance, twice.covariance)
    assert np.linalg.eigvalsh(once.covariance).min() >= -1e-12


def test_singular_block_is_reported():
    with pytest.raises(DegenerateConditioning):
        GaussianVector(np.ones((2, 2))).condition([0, 1])


def test_independent_pair_density(arithmetic_wave):
    # K((0,0), (1/4,1/4)) = (cos(pi/2) + cos(pi/2)) / 2 = 0
    out = two_point_density(arithmetic_wave, np.array([0.0, 0.0]), np.array([0.25, 0.25]))
    assert out.density_factor == pytest.approx(1 / (2 * math.pi), rel=1e-10)
    assert not out.excluded


def test_pair_density_is_symmetric(arithmetic_wave):
    p, q = np.array([0.1, 0.2]), np.array([0.37, 0.05])
    a = two_point_density(arithmetic_wave, p, q).density_factor
    b = two_point_density(arithmetic_wave, q, p).density_factor
    assert a == pytest.approx(b, rel=1e-10)


def test_coincident_points_rejected(arithmetic_wave):
    with pytest.raises(DegenerateConditioning):
        two_point_density(arithmetic_wave, np.zeros(2), np.zeros(2))


def test_near_diagonal_density_scales_like_one_over_t(arithmetic_wave):
    table = near_diagonal_diagnostic(
        arithmetic_wave, np.array([0.1, 0.3]), np.array([1.0, 0.0]), [1e-2, 1e-3, 1e-4], mc_samples=64
    )
    scaled = [row["t_times_density"] for row in table]
    assert max(scaled) / min(scaled) <= 1.02
    # gradient variance 2 pi^2 per direction
    assert scaled[-1] == pytest.approx(1 / math.sqrt(2 * math.pi**2), rel=1e-3)


def test_diagnostic_needs_decreasing_distances(arithmetic_wave):
    with pytest.raises(ModelError):
        near_diagonal_diagnostic(arithmetic_wave, np.zeros(2), np.array([1.0, 0.0]), [1e-3, 1e-2])


@pytest.mark.parametrize("n", [1, 2, 5])
def test_expected_volume_of_arithmetic_waves(torus, n):
    domain, _ = torus
    model = build_model("ArithmeticWave", {"n": n}, domain)
    expected = math.sqrt(4 * math.pi**2 * n) / (2 * math.sqrt(2))
    assert expected_volume(model) == pytest.approx(expected, rel=5e-3)


def test_expected_volume_scales_with_area(arithmetic_wave):
    wide, _ = make_domain("FlatTorus", 2, [2.0, 1.0], 64)
    assert expected_volume(arithmetic_wave, domain=wide) == pytest.approx(
        2 * expected_volume(arithmetic_wave), rel=1e-12
    )


def test_linear_field_has_no_derivative(linear_field):
    report = derivative_norm_sq_expectation(linear_field, resolution=16, mc_samples=200)
    assert report.quantity == "derivative_norm_sq"
    assert abs(report.value) <= 1e-6


def test_derivative_norm_rejects_wrong_dimension(arithmetic_wave):
    with pytest.raises(ModelError):
        derivative_norm_sq_expectation(arithmetic_wave, m=3)


def test_second_moment_reports_refinement(arithmetic_wave):
    report = second_moment(arithmetic_wave, resolution=32, mc_samples=200)
    assert report.deltas[0] == pytest.approx(2 * report.deltas[1])
    assert report.deltas[1] == pytest.approx(2 * report.deltas[2])
    assert len(report.values) == 3
    assert report.value > 0


@pytest.mark.slow
def test_second_moment_matches_monte_carlo(arithmetic_wave, torus):
    _, chart = torus
    report = second_moment(arithmetic_wave, resolution=64)
    summary = run_ensemble(arithmetic_wave, chart, 2000, 7)
    gap = abs(report.value - summary.second_moment)
    assert gap <= 3 * summary.second_moment_std_error


def test_linear_field_second_moment_is_deterministic(linear_field):
    # every nodal set is a great circle, so V = 2 pi almost surely
    report = second_moment(linear_field, resolution=32, mc_samples=400)
    assert report.value == pytest.approx(4 * math.pi**2, rel=0.02)
    assert abs(report.variance) <= 0.03 * 4 * math.pi**2


def test_geometric_increments_converge_after_extrapolation():
    status, value, drift = classify_refinement([0.185, 0.355, 0.444], order=1)
    assert status == "converged"
    assert value == pytest.approx(0.533, abs=2e-3)
    assert drift <= 0.02


def test_constant_increments_are_divergent():
    status, value, _ = classify_refinement([1.0, 1.4, 1.8], order=0)
    assert status == "divergent"
    assert value == math.inf


def test_flat_values_converge_without_extrapolation():
    status, value, drift = classify_refinement([2.0, 2.01, 2.005], order=0)
    assert status == "converged"
    assert value == 2.005
    assert drift == pytest.approx(0.01 / 2.01)


def test_erratic_values_are_unresolved():
    status, value, _ = classify_refinement([1.0, 1.6, 1.3], order=1)
    assert status == "unresolved"
    assert math.isnan(value)


def test_boundary_terms_are_reproducible(square, settings):
    domain, _ = square
    model = build_model("BargmannFock", {"truncation": 4}, domain)
    first = _boundary_terms(model, 6, 0.4, 3, 32, settings)
    second = _boundary_terms(model, 6, 0.4, 3, 32, settings)
    assert first.shape == (3,)
    assert np.all(np.isfinite(first))
    assert np.array_equal(first, second)


@pytest.mark.slow
def test_derivative_norm_diverges_on_flat_two_torus(arithmetic_wave):
    report = derivative_norm_sq_expectation(arithmetic_wave)
    assert isinstance(report, DivergenceReport)
    assert report.status == "divergent"
    assert min(report.growth_ratios) >= 1.2


@pytest.mark.slow
def test_derivative_norm_converges_on_flat_three_torus():
    domain, _ = make_domain("FlatTorus", 3, [1.0, 1.0, 1.0], 32)
    model = build_model("ArithmeticWave", {"n": 1}, domain)
    report = derivative_norm_sq_expectation(model)
    assert isinstance(report, KacRiceReport)
    assert report.value > 0
    assert report.drift <= 0.02


@pytest.mark.slow
@pytest.mark.parametrize(
    "kind, dims, extents, resolution, origin, name, params",
    [
        ("FlatTorus", 2, [1.0, 1.0], 64, None, "ArithmeticWave", {"n": 2}),
        ("Sphere2", 2, None, 5, None, "Kostlan", {"d": 3}),
        ("Rectangle", 2, [2.0, 2.0], 96, [-1.0, -1.0], "BargmannFock", {"truncation": 8}),
    ],
)
def test_expected_volume_matches_monte_carlo(kind, dims, extents, resolution, origin, name, params):
    domain, chart = make_domain(kind, dims, extents, resolution, origin)
    model = build_model(name, params, domain)
    summary = run_ensemble(model, chart, 500, 11)
    assert abs(expected_volume(model) - summary.mean) <= 3 * summary.std_error
