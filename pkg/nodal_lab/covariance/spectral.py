import itertools
import math
from typing import Any, Optional, Sequence

import numpy as np

from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import ModelError
from nodal_lab.fields import as_points
from nodal_lab.geometry import Domain, DomainKind

KERNEL_BLOCK = 4_000_000


def fold_frequencies(
    wave_vectors: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """
    Merges +w and -w into one representative (first nonzero coordinate
    positive) and collects the weight at w = 0 separately.
    """
    wave_vectors = np.atleast_2d(np.asarray(wave_vectors, dtype=float))
    weights = np.asarray(weights, dtype=float)
    folded: dict[tuple[float, ...], list] = {}
    constant = 0.0
    for w, weight in zip(wave_vectors, weights):
        nonzero = np.flatnonzero(np.abs(w) > 0)
        if len(nonzero) == 0:
            constant += weight
            continue
        if w[nonzero[0]] < 0:
            w = -w
        key = tuple(np.round(w, 12))
        if key in folded:
            folded[key][1] += weight
        else:
            folded[key] = [w, weight]
    if not folded:
        d = wave_vectors.shape[1]
        return np.zeros((0, d)), np.zeros(0), constant
    omegas = np.array([v[0] for v in folded.values()])
    folded_weights = np.array([v[1] for v in folded.values()])
    return omegas, folded_weights, constant


class SpectralModel(CovarianceModel):
    """
    K(p,q) = c0 + sum_k W_k cos(w_k.(p - q)) with basis
    [sqrt(c0)] + [sqrt(W_k) cos(w_k.x)] + [sqrt(W_k) sin(w_k.x)].
    """

    name = "SpectralSum"
    stationary = True

    def __init__(
        self,
        domain: Domain,
        wave_vectors: np.ndarray,
        weights: np.ndarray,
        constant_weight: float = 0.0,
        params: Optional[dict[str, Any]] = None,
    ):
        if domain.is_sphere:
            raise ModelError(
                f"{self.name} needs a flat domain, got {domain.kind.value}",
                "fields",
                "build_model",
            )
        super().__init__(domain, params or {})
        omegas, folded, constant = fold_frequencies(wave_vectors, weights)
        if np.any(folded < 0) or constant + constant_weight < 0:
            raise ModelError("spectral weights must be nonnegative", "fields", "build_model")
        keep = folded > 0
        self.omegas = omegas[keep]
        self.weights = folded[keep]
        self.constant_weight = float(constant + constant_weight)
        if len(self.omegas) == 0:
            raise ModelError(
                f"{self.name} has no nonconstant frequencies", "fields", "build_model"
            )

    @property
    def rank(self) -> int:
        return (1 if self.constant_weight > 0 else 0) + 2 * len(self.omegas)

    @property
    def total_variance(self) -> float:
        return float(self.constant_weight + self.weights.sum())

    def gradient_covariance(self) -> np.ndarray:
        return np.einsum("k,ki,kj->ij", self.weights, self.omegas, self.omegas)

    def basis_values(self, points: np.ndarray) -> np.ndarray:
        phase = as_points(points) @ self.omegas.T
        root = np.sqrt(self.weights)
        parts = [root * np.cos(phase), root * np.sin(phase)]
        if self.constant_weight > 0:
            parts.insert(0, np.full((len(phase), 1), np.sqrt(self.constant_weight)))
        return np.concatenate(parts, axis=1)

    def basis_jet(self, points: np.ndarray):
        points = as_points(points)
        n, d = points.shape
        phase = points @ self.omegas.T
        root = np.sqrt(self.weights)
        c = root * np.cos(phase)
        s = root * np.sin(phase)
        outer = self.omegas[:, :, None] * self.omegas[:, None, :]

        values = [c, s]
        grads = [-s[:, :, None] * self.omegas[None], c[:, :, None] * self.omegas[None]]
        hess = [-c[:, :, None, None] * outer[None], -s[:, :, None, None] * outer[None]]
        if self.constant_weight > 0:
            values.insert(0, np.full((n, 1), np.sqrt(self.constant_weight)))
            grads.insert(0, np.zeros((n, 1, d)))
            hess.insert(0, np.zeros((n, 1, d, d)))
        return (
            np.concatenate(values, axis=1),
            np.concatenate(grads, axis=1),
            np.concatenate(hess, axis=1),
        )

    def kernel(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        p, q = as_points(p), as_points(q)
        out = np.empty((len(p), len(q)))
        rows = max(1, KERNEL_BLOCK // max(1, len(q) * len(self.omegas)))
        for start in range(0, len(p), rows):
            block = p[start : start + rows]
            diff = block[:, None, :] - q[None, :, :]
            phase = diff @ self.omegas.T
            out[start : start + rows] = np.cos(phase) @ self.weights
        return out + self.constant_weight

    @property
    def normalization(self) -> str:
        total = self.total_variance
        if abs(total - 1.0) < 1e-12:
            return "unit variance"
        return f"variance {total:.12g}"


def _lattice_wave_vectors(domain: Domain, frequencies: np.ndarray) -> np.ndarray:
    return 2.0 * math.pi * frequencies / np.asarray(domain.extents)[None, :]


def lattice_points(n: int, dims: int) -> np.ndarray:
    """All xi in Z^dims with |xi|^2 = n."""
    bound = int(math.isqrt(n))
    axis = range(-bound, bound + 1)
    points = [xi for xi in itertools.product(axis, repeat=dims) if sum(x * x for x in xi) == n]
    return np.array(points, dtype=float).reshape(-1, dims)


class ArithmeticWaveModel(SpectralModel):
    """
    Arithmetic random wave: frequencies xi in Z^m with |xi|^2 = n, equal
    weights normalised to unit variance.
    """

    name = "ArithmeticWave"
    isotropic = True

    def __init__(self, domain: Domain, n: int):
        if n < 1:
            raise ModelError("ArithmeticWave needs n >= 1", "fields", "build_model")
        xi = lattice_points(n, domain.dims)
        if len(xi) == 0:
            raise ModelError(
                f"no lattice points with |xi|^2 = {n} in dimension {domain.dims}",
                "fields",
                "build_model",
            )
        self.n = n
        self.lattice = xi
        super().__init__(
            domain,
            _lattice_wave_vectors(domain, xi),
            np.full(len(xi), 1.0 / len(xi)),
            params={"n": n},
        )

    @property
    def energy(self) -> float:
        """E_n = 4 pi^2 n on the unit torus."""
        return 4.0 * math.pi**2 * self.n

    @property
    def normalization(self) -> str:
        return f"unit variance, equal weight 1/{len(self.lattice)} per lattice point"


class AtomDemoModel(SpectralModel):
    """Arithmetic wave plus a constant basis function sigma0 * 1."""

    name = "AtomDemo"

    def __init__(self, domain: Domain, n: int, sigma0: float):
        if sigma0 <= 0:
            raise ModelError("AtomDemo needs sigma0 > 0", "fields", "build_model")
        xi = lattice_points(n, domain.dims)
        if len(xi) == 0:
            raise ModelError(
                f"no lattice points with |xi|^2 = {n} in dimension {domain.dims}",
                "fields",
                "build_model",
            )
        self.sigma0 = float(sigma0)
        super().__init__(
            domain,
            _lattice_wave_vectors(domain, xi),
            np.full(len(xi), 1.0 / len(xi)),
            constant_weight=sigma0**2,
            params={"n": n, "sigma0": sigma0},
        )

    @property
    def normalization(self) -> str:
        return f"unit-variance fluctuation plus constant term of variance {self.sigma0**2:.12g}"


class SpectralSumModel(SpectralModel):
    """
    User frequency set. On a torus the frequencies are lattice vectors and
    wave vectors are 2 pi xi / L; on a rectangle they are taken as given.
    """

    name = "SpectralSum"

    def __init__(
        self,
        domain: Domain,
        frequencies: Sequence[Sequence[float]],
        weights: Optional[Sequence[float]] = None,
        normalize: bool = True,
    ):
        xi = np.atleast_2d(np.asarray(frequencies, dtype=float))
        if xi.shape[1] != domain.dims:
            raise ModelError(
                f"frequencies must have {domain.dims} components", "fields", "build_model"
            )
        if weights is None:
            weights = np.ones(len(xi))
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(xi):
            raise ModelError(
                "weights and frequencies differ in length", "fields", "build_model"
            )
        if domain.kind == DomainKind.FLAT_TORUS:
            if not np.allclose(xi, np.round(xi)):
                raise ModelError(
                    "torus frequencies must be integer lattice vectors",
                    "fields",
                    "build_model",
                )
            wave_vectors = _lattice_wave_vectors(domain, np.round(xi))
        else:
            wave_vectors = xi
        if normalize:
            weights = weights / weights.sum()
        super().__init__(
            domain,
            wave_vectors,
            weights,
            params={
                "frequencies": xi.tolist(),
                "weights": weights.tolist(),
                "normalize": normalize,
            },
        )


class BerryWaveModel(SpectralModel):
    """
    Truncated monochromatic wave |xi| = k: equally spaced directions on the
    half circle (2-D) or a Fibonacci half sphere (3-D).
    """

    name = "BerryWave"
    isotropic = True

    def __init__(self, domain: Domain, k: float, truncation: int = 32):
        if domain.kind != DomainKind.RECTANGLE:
            raise ModelError(
                "BerryWave is defined on a Rectangle", "fields", "build_model"
            )
        if k <= 0 or truncation < 2:
            raise ModelError(
                "BerryWave needs k > 0 and truncation >= 2", "fields", "build_model"
            )
        if domain.dims == 2:
            theta = math.pi * np.arange(truncation) / truncation
            directions = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        else:
            i = np.arange(truncation) + 0.5
            z = i / truncation
            r = np.sqrt(1.0 - z**2)
            phi = math.pi * (3.0 - math.sqrt(5.0)) * i
            directions = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        super().__init__(
            domain,
            k * directions,
            np.full(truncation, 1.0 / truncation),
            params={"k": k, "truncation": truncation},
        )


class BargmannFockModel(SpectralModel):
    """
    exp(-|p-q|^2 / 2 l^2) truncated by a tensor Gauss-Hermite rule on its
    Gaussian spectral measure.
    """

    name = "BargmannFock"
    isotropic = True

    def __init__(self, domain: Domain, truncation: int = 8, length_scale: float = 1.0):
        if domain.kind != DomainKind.RECTANGLE:
            raise ModelError(
                "BargmannFock is defined on a Rectangle", "fields", "build_model"
            )
        if truncation < 2 or length_scale <= 0:
            raise ModelError(
                "BargmannFock needs truncation >= 2 and length_scale > 0",
                "fields",
                "build_model",
            )
        nodes, weights = np.polynomial.hermite_e.hermegauss(truncation)
        weights = weights / weights.sum()
        grids = np.meshgrid(*([nodes] * domain.dims), indexing="ij")
        wgrids = np.meshgrid(*([weights] * domain.dims), indexing="ij")
        omegas = np.stack([g.reshape(-1) for g in grids], axis=1) / length_scale
        tensor = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=1), axis=1)
        super().__init__(
            domain,
            omegas,
            tensor,
            params={"truncation": truncation, "length_scale": length_scale},
        )
