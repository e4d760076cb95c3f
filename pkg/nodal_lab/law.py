"""
Law of the nodal volume: Monte Carlo ensembles, the atom at zero, a kernel
density for the continuous part, and the density identity that rebuilds a
centred density from its g-function.
"""
from functools import partial
from typing import Optional

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid

from nodal_lab.config import Settings, get_settings
from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import InsufficientSamples, RegularityViolation
from nodal_lab.fields import sample_field
from nodal_lab.geometry import GridChart
from nodal_lab.logger import logger
from nodal_lab.nodal import component_count, extract_nodal_set, nodal_volume
from nodal_lab.schemas import EnsembleSummary, LawEstimate
from nodal_lab.tasks import member_seeds, run_ordered

MIN_LAW_SAMPLES = 200
BIN_COUNTS = (20, 40, 80, 160)
WILSON_Z = 1.959963984540054
GRID_POINTS = 1024


def _member(seed: int, model: CovarianceModel, chart: GridChart, settings: Settings):
    f = sample_field(model, int(seed))
    try:
        nodal = extract_nodal_set(f, model.domain, chart, settings)
    except RegularityViolation as exc:
        return int(seed), None, None, exc.message
    return int(seed), nodal_volume(nodal), component_count(nodal), None


def run_ensemble(
    model: CovarianceModel,
    chart: GridChart,
    n: int,
    base_seed: int,
    n_jobs: Optional[int] = None,
    settings: Optional[Settings] = None,
) -> EnsembleSummary:
    """
    Samples n members with independent seeds derived from base_seed and
    records V(Z) and the component count of each. Members whose nodal set
    violates the regularity floor are logged and left out of the statistics.
    """
    settings = settings or get_settings()
    seeds = member_seeds(base_seed, n)
    results = run_ordered(
        partial(_member, model=model, chart=chart, settings=settings), seeds, n_jobs
    )

    values, counts, kept, excluded = [], [], [], []
    for seed, volume, count, failure in results:
        if failure is not None:
            logger.warning(
                f"Ensemble member excluded: {failure}",
                extra={"seed": seed, "model": model.name},
            )
            excluded.append(seed)
            continue
        values.append(volume)
        counts.append(count)
        kept.append(seed)

    v = np.asarray(values, dtype=float)
    k = len(v)
    mean = float(v.mean()) if k else 0.0
    variance = float(v.var(ddof=1)) if k > 1 else 0.0
    squares = v**2
    second_sd = float(squares.std(ddof=1)) if k > 1 else 0.0

    logger.info(
        f"Ensemble of {k} members for {model.name}: mean V = {mean:.6g}",
        extra={"excluded": len(excluded)},
    )
    return EnsembleSummary(
        model=model.name,
        base_seed=int(base_seed),
        requested=int(n),
        values=[float(x) for x in v],
        component_counts=counts,
        seeds=kept,
        excluded_seeds=excluded,
        mean=mean,
        variance=variance,
        std_error=float(np.sqrt(variance / k)) if k else 0.0,
        second_moment=float(squares.mean()) if k else 0.0,
        second_moment_std_error=second_sd / np.sqrt(k) if k else 0.0,
    )


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z**2 / n
    centre = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return float(max(0.0, centre - half)), float(min(1.0, centre + half))


def _distinct(values: np.ndarray) -> bool:
    rounded = {f"{x:.12g}" for x in values}
    return len(rounded) == len(values)


def max_bin_mass(values: np.ndarray, bins: tuple[int, ...] = BIN_COUNTS) -> dict[int, float]:
    """Largest share of the values falling in one histogram bin, per bin count."""
    if len(values) == 0:
        return {b: 0.0 for b in bins}
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return {b: 1.0 for b in bins}
    return {
        b: float(np.histogram(values, bins=b, range=(lo, hi))[0].max() / len(values))
        for b in bins
    }


def estimate_law(
    summary: EnsembleSummary,
    grid_points: int = GRID_POINTS,
    settings: Optional[Settings] = None,
) -> LawEstimate:
    """
    Splits the empirical law of V into an atom P(V = 0) and a continuous
    part on (0, inf). The continuous density is a Gaussian kernel estimate
    truncated to V > 0 and scaled to carry mass 1 - P(V = 0). An ensemble
    whose values coincide up to mesh error is flagged degenerate and gets
    no density.
    """
    settings = settings or get_settings()
    v = np.asarray(summary.values, dtype=float)
    n = len(v)
    zeros = int(np.sum(v == 0.0))
    mean = float(v.mean()) if n else 0.0

    if n and np.ptp(v) <= settings.degenerate_spread * max(abs(mean), 1e-12):
        logger.info(f"Ensemble for {summary.model} is degenerate at V = {mean:.6g}")
        return LawEstimate(
            n=n,
            zeros=zeros,
            atom=zeros / n,
            atom_interval=wilson_interval(zeros, n),
            degenerate=True,
            mean=mean,
            support=(float(v.min()), float(v.max())),
        )

    if n < MIN_LAW_SAMPLES:
        raise InsufficientSamples(
            f"{n} ensemble values; the law estimate needs at least {MIN_LAW_SAMPLES}",
            "law",
            "estimate_law",
        )

    atom = zeros / n
    positive = v[v > 0.0]
    if len(positive) < 2:
        raise InsufficientSamples(
            f"{len(positive)} nonzero values; cannot fit a density", "law", "estimate_law"
        )

    kde = stats.gaussian_kde(positive)
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(0.0, positive.max() + 4.0 * bandwidth, grid_points)
    raw = kde(grid)
    density = raw * (1.0 - atom) / trapezoid(raw, grid)

    # Centred continuous part: V conditioned on V > 0, shifted to mean zero.
    conditional = density / (1.0 - atom)
    c = float(trapezoid(grid * conditional, grid))
    centred_grid = grid - c
    g, mask = nv_g_function(centred_grid, conditional, settings=settings)
    e_abs = float(trapezoid(np.abs(centred_grid) * conditional, centred_grid))
    rebuilt, gap = nv_reconstruct(centred_grid, conditional, g, e_abs)

    masses = max_bin_mass(positive)
    ordered = [masses[b] for b in BIN_COUNTS]
    return LawEstimate(
        n=n,
        zeros=zeros,
        atom=atom,
        atom_interval=wilson_interval(zeros, n),
        degenerate=False,
        mean=mean,
        support=(float(positive.min()), float(positive.max())),
        bandwidth=bandwidth,
        grid=grid.tolist(),
        density=density.tolist(),
        max_bin_mass=masses,
        no_secondary_atom=all(a >= b for a, b in zip(ordered, ordered[1:])) and ordered[-1] < 0.5,
        distinct=_distinct(positive),
        centred_grid=centred_grid.tolist(),
        centred_density=conditional.tolist(),
        g=[None if not ok else float(x) for x, ok in zip(g, mask)],
        reconstruction=[None if not np.isfinite(x) else float(x) for x in rebuilt],
        l1_gap=gap,
    )


def nv_g_function(
    grid: np.ndarray,
    density: np.ndarray,
    c: Optional[float] = None,
    floor: Optional[float] = None,
    settings: Optional[Settings] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    g(x) = (integral from x to inf of y pi(y) dy) / pi(x) for a centred density pi
    sampled on an increasing grid. Points where pi falls below the floor
    (relative to its maximum) or where g is not positive are masked; g is
    NaN there. If c is given the density is taken to vanish below -c.
    """
    settings = settings or get_settings()
    grid = np.asarray(grid, dtype=float)
    density = np.asarray(density, dtype=float)
    if c is not None:
        density = np.where(grid >= -c, density, 0.0)
    floor = settings.density_floor if floor is None else floor
    moment = grid * density
    # Reverse cumulative integral from the right end of the grid.
    tail = -cumulative_trapezoid(moment[::-1], grid[::-1], initial=0.0)[::-1]
    mask = density >= floor * density.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(mask, tail / density, np.nan)
    mask &= np.isfinite(g) & (g > 0.0)
    g[~mask] = np.nan
    return g, mask


def nv_reconstruct(
    grid: np.ndarray,
    density: np.ndarray,
    g: np.ndarray,
    e_abs: float,
) -> tuple[np.ndarray, float]:
    """
    Rebuilds pi(x) = E|V|/(2 g(x)) exp(-integral from 0 to x of y/g(y) dy) on the
    unmasked stretch of grid containing 0 and returns it with the L1 gap to
    the supplied density over that stretch.
    """
    grid = np.asarray(grid, dtype=float)
    density = np.asarray(density, dtype=float)
    g = np.asarray(g, dtype=float)
    valid = np.isfinite(g) & (g > 0.0)

    rebuilt = np.full_like(grid, np.nan)
    origin = int(np.argmin(np.abs(grid)))
    if not valid[origin]:
        return rebuilt, float("nan")
    lo = origin
    while lo > 0 and valid[lo - 1]:
        lo -= 1
    hi = origin
    while hi < len(grid) - 1 and valid[hi + 1]:
        hi += 1

    x = grid[lo : hi + 1]
    ratio = x / g[lo : hi + 1]
    running = cumulative_trapezoid(ratio, x, initial=0.0)
    running -= np.interp(0.0, x, running)
    rebuilt[lo : hi + 1] = e_abs / (2.0 * g[lo : hi + 1]) * np.exp(-running)
    gap = float(trapezoid(np.abs(rebuilt[lo : hi + 1] - density[lo : hi + 1]), x))
    return rebuilt, gap
