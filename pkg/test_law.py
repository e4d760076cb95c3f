import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from nodal_lab.covariance.factory import build_model
from nodal_lab.errors import InsufficientSamples
from nodal_lab.law import (
    estimate_law,
    max_bin_mass,
    nv_g_function,
    nv_reconstruct,
    run_ensemble,
    wilson_interval,
)
from nodal_lab.schemas import EnsembleSummary


def _summary(values):
    values = [float(v) for v in values]
    return EnsembleSummary(
        model="fixture",
        base_seed=0,
        requested=len(values),
        values=values,
        component_counts=[1] * len(values),
        seeds=list(range(len(values))),
        excluded_seeds=[],
        mean=float(np.mean(values)),
        variance=float(np.var(values, ddof=1)),
        std_error=0.0,
        second_moment=float(np.mean(np.square(values))),
        second_moment_std_error=0.0,
    )


@pytest.fixture
def normal_grid():
    grid = np.arange(-8.0, 8.0 + 2.5e-4, 5e-4)
    return grid, stats.norm.pdf(grid)


def test_g_of_standard_normal_is_one(normal_grid):
    grid, density = normal_grid
    g, mask = nv_g_function(grid, density)
    assert mask[np.abs(grid) < 4.0].all()
    assert not mask[np.abs(grid) > 4.5].any()
    assert np.isnan(g[~mask]).all()
    assert np.max(np.abs(g[mask] - 1.0)) <= 1e-6


def test_reconstruct_standard_normal(normal_grid):
    grid, density = normal_grid
    g, _ = nv_g_function(grid, density)
    rebuilt, gap = nv_reconstruct(grid, density, g, math.sqrt(2 / math.pi))
    assert gap <= 1e-4
    assert rebuilt[np.argmin(np.abs(grid))] == pytest.approx(stats.norm.pdf(0.0), rel=1e-4)


def test_shifted_exponential():
    grid = np.arange(-1.0, 30.0 + 5e-4, 1e-3)
    density = np.exp(-(grid + 1.0))
    g, mask = nv_g_function(grid, density, c=1.0)
    assert np.max(np.abs(g[mask] - (grid[mask] + 1.0))) <= 1e-4
    _, gap = nv_reconstruct(grid, density, g, 2.0 / math.e)
    assert gap <= 1e-3


def test_reconstruct_needs_valid_origin():
    grid = np.linspace(-1.0, 1.0, 11)
    g = np.full(11, np.nan)
    rebuilt, gap = nv_reconstruct(grid, np.ones(11), g, 1.0)
    assert np.isnan(rebuilt).all()
    assert math.isnan(gap)


def test_wilson_interval():
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0
    assert hi == pytest.approx(1.959963984540054**2 / (100 + 1.959963984540054**2))
    lo, hi = wilson_interval(50, 100)
    assert 0.5 - lo == pytest.approx(hi - 0.5)


def test_max_bin_mass():
    masses = max_bin_mass(np.linspace(0.0, 1.0, 1000))
    assert set(masses) == {20, 40, 80, 160}
    assert masses[20] == pytest.approx(0.05, abs=1e-3)
    assert max_bin_mass(np.full(5, 2.0))[80] == 1.0


def test_constant_ensemble_is_degenerate(linear_field, sphere):
    _, chart = sphere
    summary = run_ensemble(linear_field, chart, 100, 3)
    assert summary.n == 100
    assert summary.variance <= 1e-6 * (2 * math.pi) ** 2
    assert summary.mean == pytest.approx(2 * math.pi, rel=1e-3)
    law = estimate_law(summary)
    assert law.degenerate
    assert law.atom == 0.0
    assert law.density == []


def test_small_ensemble_cannot_be_estimated(arithmetic_wave, torus):
    _, chart = torus
    summary = run_ensemble(arithmetic_wave, chart, 20, 5)
    with pytest.raises(InsufficientSamples):
        estimate_law(summary)


def test_ensemble_is_deterministic(arithmetic_wave, torus):
    _, chart = torus
    a = run_ensemble(arithmetic_wave, chart, 6, 99)
    b = run_ensemble(arithmetic_wave, chart, 6, 99, n_jobs=2)
    assert a == b
    assert len(set(a.seeds)) == len(a.seeds)


def test_continuous_part_carries_the_remaining_mass(rng):
    values = np.concatenate([np.zeros(60), rng.gamma(4.0, 0.5, 240)])
    law = estimate_law(_summary(values))
    assert law.atom == pytest.approx(0.2)
    assert law.atom_interval[0] < 0.2 < law.atom_interval[1]
    assert law.continuous_mass == pytest.approx(0.8, rel=1e-9)
    assert law.grid[0] == 0.0
    assert law.distinct
    assert trapezoid(law.centred_density, law.centred_grid) == pytest.approx(1.0, rel=1e-9)
    assert law.l1_gap is not None


@pytest.mark.slow
def test_atom_model_has_both_parts(torus):
    domain, chart = torus
    model = build_model("AtomDemo", {"n": 1, "sigma0": 3.0}, domain)
    summary = run_ensemble(model, chart, 2000, 17)
    law = estimate_law(summary)
    assert 0.02 < law.atom < 0.98
    assert law.continuous_mass == pytest.approx(1.0 - law.atom, rel=1e-9)
    assert law.no_secondary_atom
    assert law.l1_gap <= 0.05

    values = np.asarray(summary.values)
    smallest = [values[:n][values[:n] > 0].min() for n in (100, 500, 2000)]
    assert smallest[0] >= smallest[1] >= smallest[2]
    assert smallest[2] < smallest[0]


@pytest.mark.slow
def test_spherical_harmonic_topology_varies(sphere):
    domain, chart = sphere
    model = build_model("SphericalHarmonic", {"l": 20}, domain)
    summary = run_ensemble(model, chart, 500, 29)
    assert summary.n >= 490
    assert len(set(summary.component_counts)) >= 2
    assert min(summary.component_counts) >= 1
