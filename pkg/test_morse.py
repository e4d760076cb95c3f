import math

import numpy as np
import pytest

from nodal_lab.errors import InsufficientSamples, ModelError, MorseFloorViolation
from nodal_lab.fields import ConstantField, PlaneWaveField, PolynomialField
from nodal_lab.geometry import make_domain
from nodal_lab.morse import (
    LevelIntegrand,
    Stratum,
    find_critical_zeros_on_segment,
    level_profile,
    model_level_integral,
    morse_index,
    profile_continuity,
    segment_scan,
)


@pytest.mark.parametrize(
    "diagonal, index",
    [([2.0, 2.0], 0), ([2.0, -2.0], 1), ([-1.0, -3.0, -5.0], 3)],
)
def test_morse_index(diagonal, index):
    assert morse_index(np.diag(diagonal)) == index


def test_degenerate_hessian_violates_floor():
    with pytest.raises(MorseFloorViolation):
        morse_index(np.diag([1.0, 1e-9]))


def test_paraboloid_minimum(square):
    domain, chart = square
    f = PolynomialField([[2, 0], [0, 2], [0, 0]], [1.0, 1.0, -0.25])
    zeros = find_critical_zeros_on_segment(f, ConstantField(1.0), (0.0, 1.0), domain, chart)
    assert len(zeros) == 1
    zero = zeros[0]
    assert zero.stratum == Stratum.INTERIOR
    assert zero.t == pytest.approx(0.25, abs=1e-9)
    assert zero.index == 0
    assert np.allclose(zero.point, 0.0, atol=1e-8)
    assert zero.certificate == 1.0


def test_saddle(square):
    domain, chart = square
    f = PolynomialField([[2, 0], [0, 2]], [1.0, -1.0])
    zeros = find_critical_zeros_on_segment(f, ConstantField(1.0), (-0.5, 0.5), domain, chart)
    assert [z.index for z in zeros] == [1]
    assert abs(zeros[0].t) <= 1e-9
    record = zeros[0].to_record()
    assert record.stratum == "interior"
    assert sorted(record.eigenvalues)[0] < 0 < sorted(record.eigenvalues)[1]


def test_interval_must_increase(square):
    domain, chart = square
    f = PolynomialField([[2, 0]], [1.0])
    with pytest.raises(ModelError):
        find_critical_zeros_on_segment(f, ConstantField(1.0), (1.0, 0.0), domain, chart)


def test_segment_scan_is_reproducible(arithmetic_wave, torus):
    _, chart = torus
    a = segment_scan(arithmetic_wave, chart, 4, 11)
    b = segment_scan(arithmetic_wave, chart, 4, 11)
    assert a == b
    assert a.segments == 4
    assert len(a.root_counts) == 4
    assert a.mean_roots_per_unit_t == pytest.approx(sum(a.root_counts) / 4)


@pytest.fixture(scope="module")
def paraboloid_profile():
    domain, chart = make_domain("Rectangle", 2, [2.0, 2.0], 128, [-1.0, -1.0])
    T = PolynomialField([[2, 0], [0, 2]], [1.0, 1.0])
    return level_profile(T, domain, chart, (-0.1, 0.5), t_resolution=16, ladder_depth=4)


def test_level_profile_of_paraboloid(paraboloid_profile):
    profile = paraboloid_profile
    assert profile.critical_values == pytest.approx([0.0], abs=1e-9)
    assert 0.0 not in profile.t.tolist()
    for t, phi in zip(profile.t, profile.phi):
        if t > 0.05:
            assert phi == pytest.approx(2 * math.pi * math.sqrt(t), rel=1e-3)
        if t < 0:
            assert phi == 0.0

    fits = {fit.side: fit for fit in profile.fits}
    assert fits["right"].template == "g0"
    assert fits["right"].alpha == pytest.approx(-0.5, abs=0.1)
    assert fits["right"].sign == 1
    assert fits["left"].template == "bounded"

    gaps = profile_continuity(profile, profile.critical_values[0])
    assert len(gaps) == 5
    assert gaps[-1]["gap"] < gaps[0]["gap"]


def test_continuity_needs_a_critical_value(paraboloid_profile):
    with pytest.raises(InsufficientSamples):
        profile_continuity(paraboloid_profile, 0.3)


def test_circle_in_the_model_chart():
    t = 0.01
    value = model_level_integral(2, 0, None, LevelIntegrand.VOLUME, t, 1.0)
    assert value == pytest.approx(2 * math.pi * math.sqrt(t), rel=1e-10)


def test_saddle_length_tends_to_crossing_lines():
    value = model_level_integral(1, 1, None, "volume", 1e-8, 1.0)
    assert value == pytest.approx(4 * math.sqrt(2), rel=1e-3)


def test_curvature_grows_logarithmically_in_three_dimensions():
    a = model_level_integral(2, 1, None, "curvature", 1e-6, 1.0)
    b = model_level_integral(2, 1, None, "curvature", 1e-8, 1.0)
    assert b - a == pytest.approx(math.pi / math.sqrt(2) * math.log(100.0), rel=1e-2)


def test_curvature_vanishes_in_four_dimensions():
    # the level integral behaves like -pi^2 sqrt(t)
    for t in (1e-8, 1e-10):
        value = model_level_integral(2, 2, None, "curvature", t, 1.0)
        assert value == pytest.approx(-math.pi**2 * math.sqrt(t), rel=1e-2)


def test_no_positive_directions_gives_empty_level():
    assert model_level_integral(0, 2, None, "volume", 0.01, 1.0) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_plus": 1, "n_minus": 0, "t": 0.01},
        {"n_plus": 3, "n_minus": 2, "t": 0.01},
        {"n_plus": 2, "n_minus": 0, "t": 2.0},
        {"n_plus": 2, "n_minus": 0, "t": 0.0},
    ],
)
def test_model_chart_rejects_bad_input(kwargs):
    with pytest.raises(ModelError):
        model_level_integral(metric=None, integrand="volume", eps=1.0, **kwargs)


def test_metric_must_be_positive_definite():
    with pytest.raises(ModelError):
        model_level_integral(2, 0, np.diag([1.0, -1.0]), "volume", 0.01, 1.0)


@pytest.mark.parametrize("k", [0.0, 1.0, 3.0])
def test_power_integrand_on_the_circle(k):
    t = 0.04
    value = model_level_integral(2, 0, None, "power", t, 1.0, k=k)
    assert value == pytest.approx(2 * math.pi * math.sqrt(t) * t ** (-k / 2), rel=1e-10)


@pytest.fixture(scope="module")
def fine_square():
    return make_domain("Rectangle", 2, [2.0, 2.0], 256, [-1.0, -1.0])


def test_saddle_diverges_on_both_sides(fine_square):
    domain, chart = fine_square
    T = PolynomialField([[2, 0], [0, 2]], [1.0, -1.0])
    profile = level_profile(T, domain, chart, (-0.5, 0.5), t_resolution=8)
    assert profile.critical_values == pytest.approx([0.0], abs=1e-9)
    fits = {fit.side: fit for fit in profile.fits}
    for side, sign in (("left", 1), ("right", -1)):
        assert fits[side].template == "g1"
        assert fits[side].alpha == pytest.approx(-0.5, abs=0.05)
        assert fits[side].sign == sign


def test_maximum_diverges_on_the_left_only(fine_square):
    domain, chart = fine_square
    T = PolynomialField([[2, 0], [0, 2]], [-1.0, -1.0])
    profile = level_profile(T, domain, chart, (-0.5, 0.1), t_resolution=8)
    assert [z.index for z in profile.critical_zeros] == [2]
    fits = {fit.side: fit for fit in profile.fits}
    assert fits["left"].template == "g2"
    assert fits["left"].sign == -1
    assert fits["left"].alpha == pytest.approx(-0.5, abs=0.05)
    assert fits["right"].template == "bounded"


def test_boundary_critical_point_diverges_like_inverse_root(fine_square):
    domain, chart = fine_square
    # y + x^2 restricted to the face y = -1 has a minimum at x = 0
    T = PolynomialField([[0, 1], [2, 0]], [1.0, 1.0])
    profile = level_profile(T, domain, chart, (-1.5, -0.5), t_resolution=8)
    assert profile.critical_values == pytest.approx([-1.0], abs=1e-8)
    assert [z.stratum for z in profile.critical_zeros] == [Stratum.BOUNDARY]
    assert np.allclose(profile.critical_zeros[0].point, [0.0, -1.0], atol=1e-8)
    fits = {fit.side: fit for fit in profile.fits}
    assert fits["right"].alpha == pytest.approx(-0.5, abs=0.05)
    assert fits["right"].sign == 1
    assert fits["left"].template == "bounded"


def test_minimum_and_maximum_at_one_level_diverge_on_opposite_sides(fine_square):
    domain, chart = fine_square
    # x ((x^2 - a^2)^2 + 4 a^2 y^2): a minimum at (a, 0), a maximum at (-a, 0),
    # Hessians +-8 a^3 I, both at level 0
    a = 0.8
    T = PolynomialField(
        [[5, 0], [3, 0], [1, 0], [1, 2]],
        [1.0, -2 * a**2, a**4, 4 * a**2],
    )
    profile = level_profile(T, domain, chart, (-0.09, 0.09), t_resolution=8, ladder_depth=5)
    assert profile.critical_values == pytest.approx([0.0], abs=1e-9)
    by_index = {z.index: z for z in profile.critical_zeros}
    assert sorted(by_index) == [0, 2]
    assert np.allclose(by_index[0].point, [a, 0.0], atol=1e-8)
    assert np.allclose(by_index[2].point, [-a, 0.0], atol=1e-8)
    assert np.allclose(by_index[0].eigenvalues, 8 * a**3, rtol=1e-6)

    fits = {fit.side: fit for fit in profile.fits}
    assert fits["right"].template == "g0"
    assert fits["left"].template == "g2"
    assert fits["right"].sign == -fits["left"].sign


def test_torus_waves_have_one_saddle_pair_between_extrema():
    domain, chart = make_domain("FlatTorus", 2, [1.0, 1.0], 64)
    T = PlaneWaveField([[2 * math.pi, 0.0], [0.0, 2 * math.pi]], [1.0, 1.0])
    zeros = find_critical_zeros_on_segment(T, ConstantField(-1.0), (-2.5, 2.5), domain, chart)
    assert [z.t for z in zeros] == pytest.approx([-2.0, 0.0, 0.0, 2.0], abs=1e-9)
    assert [z.index for z in zeros] == [0, 1, 1, 2]
    assert np.allclose(zeros[0].point, [0.5, 0.5], atol=1e-8)


def test_height_profile_on_the_sphere():
    domain, chart = make_domain("Sphere2", 2, None, 6)
    T = PolynomialField([[0, 0, 1]], [1.0])
    profile = level_profile(T, domain, chart, (-1.2, 1.2), t_resolution=13, ladder_depth=6)
    assert profile.critical_values == pytest.approx([-1.0, 1.0], abs=1e-8)
    assert [z.index for z in profile.critical_zeros] == [0, 2]
    for t, phi in zip(profile.t, profile.phi):
        if abs(t) <= 0.9:
            assert phi == pytest.approx(2 * math.pi * math.sqrt(1 - t**2), rel=5e-3)
        if abs(t) > 1:
            assert phi == 0.0

    south = [fit for fit in profile.fits if fit.template == "g0"]
    north = [fit for fit in profile.fits if fit.template == "g2"]
    assert len(south) == 1 and south[0].side == "right"
    assert len(north) == 1 and north[0].side == "left"


def test_curvature_stays_bounded_in_four_dimensions():
    taus = (1e-4, 1e-5, 1e-6)
    values = [model_level_integral(2, 2, None, "curvature", t, 1.0) for t in taus]
    growing = [model_level_integral(2, 1, None, "curvature", t, 1.0) for t in taus]
    assert max(abs(v) for v in values) <= 1.02 * abs(values[0])
    assert max(values) - min(values) <= 0.1
    assert max(growing) - min(growing) >= 5.0


@pytest.mark.slow
def test_two_hundred_segments_are_transverse(arithmetic_wave, torus):
    _, chart = torus
    report = segment_scan(arithmetic_wave, chart, 200, 23)
    assert report.segments == 200
    assert report.floor_violations == 0
    assert all(count < 1000 for count in report.root_counts)
    assert math.isfinite(report.mean_roots_per_unit_t)
    assert report.min_certificate is not None and report.min_certificate > 0
