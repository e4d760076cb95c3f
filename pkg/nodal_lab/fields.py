import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from nodal_lab.errors import ModelError
from nodal_lab.geometry import Domain

if TYPE_CHECKING:
    from nodal_lab.covariance.base import CovarianceModel


@dataclass(frozen=True, eq=False)
class Jet:
    """Value, gradient and Hessian at a batch of points."""

    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray

    def __len__(self) -> int:
        return len(self.value)


def as_points(points) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float))


class FieldFunction(ABC):
    """
    A C^2 scalar function with exact jets. Deterministic fixtures and
    sampled Gaussian paths both play this role.
    """

    @abstractmethod
    def ambient_jet(self, points: np.ndarray) -> Jet:
        pass

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.ambient_jet(points).value

    def __add__(self, other):
        if isinstance(other, FieldFunction):
            return SumField([self, other], [1.0, 1.0])
        return SumField([self], [1.0], constant=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __rsub__(self, other):
        return (-1.0) * self + other

    def __neg__(self):
        return SumField([self], [-1.0])

    def __mul__(self, other):
        if isinstance(other, FieldFunction):
            return ProductField(self, other)
        return SumField([self], [float(other)])

    __rmul__ = __mul__


class ConstantField(FieldFunction):
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return np.full(len(as_points(points)), self.value)

    def ambient_jet(self, points: np.ndarray) -> Jet:
        points = as_points(points)
        n, d = points.shape
        return Jet(np.full(n, self.value), np.zeros((n, d)), np.zeros((n, d, d)))


class PlaneWaveField(FieldFunction):
    """f(x) = c + sum_k a_k cos(w_k.x) + b_k sin(w_k.x)."""

    def __init__(
        self,
        wave_vectors: Sequence[Sequence[float]],
        cos_coeffs: Sequence[float],
        sin_coeffs: Optional[Sequence[float]] = None,
        constant: float = 0.0,
    ):
        self.wave_vectors = np.atleast_2d(np.asarray(wave_vectors, dtype=float))
        self.cos_coeffs = np.asarray(cos_coeffs, dtype=float)
        if sin_coeffs is None:
            sin_coeffs = np.zeros_like(self.cos_coeffs)
        self.sin_coeffs = np.asarray(sin_coeffs, dtype=float)
        self.constant = float(constant)

    @classmethod
    def sine(cls, wave_vector, amplitude: float = 1.0, phase: float = 0.0):
        """amplitude * sin(w.x + phase)."""
        return cls(
            [wave_vector], [amplitude * np.sin(phase)], [amplitude * np.cos(phase)]
        )

    @classmethod
    def cosine(cls, wave_vector, amplitude: float = 1.0, phase: float = 0.0):
        """amplitude * cos(w.x + phase)."""
        return cls(
            [wave_vector], [amplitude * np.cos(phase)], [-amplitude * np.sin(phase)]
        )

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        phase = as_points(points) @ self.wave_vectors.T
        return (
            self.constant
            + np.cos(phase) @ self.cos_coeffs
            + np.sin(phase) @ self.sin_coeffs
        )

    def ambient_jet(self, points: np.ndarray) -> Jet:
        phase = as_points(points) @ self.wave_vectors.T
        c, s = np.cos(phase), np.sin(phase)
        a, b = self.cos_coeffs, self.sin_coeffs
        value = self.constant + c @ a + s @ b
        gradient = (-s * a + c * b) @ self.wave_vectors
        second = -(c * a + s * b)
        hessian = np.einsum(
            "nk,ki,kj->nij", second, self.wave_vectors, self.wave_vectors
        )
        return Jet(value, gradient, hessian)


def monomial_jets(
    points: np.ndarray, exponents: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values (N,K), gradients (N,K,D) and Hessians (N,K,D,D) of x^alpha."""
    points = as_points(points)
    exponents = np.asarray(exponents, dtype=np.int64)
    n, d = points.shape
    k = len(exponents)

    # factor[r][i] = d^r/dx_i^r of x_i^{e_i}, shape (N,K)
    factor = np.zeros((3, d, n, k))
    for i in range(d):
        e = exponents[:, i]
        x = points[:, i][:, None]
        for r in range(3):
            falling = np.ones(k)
            for j in range(r):
                falling = falling * (e - j)
            power = np.where(e >= r, e - r, 0)
            factor[r, i] = np.where(e >= r, falling * x**power, 0.0)

    value = np.prod(factor[0], axis=0)
    gradient = np.zeros((n, k, d))
    hessian = np.zeros((n, k, d, d))
    for i in range(d):
        rest = np.prod(np.delete(factor[0], i, axis=0), axis=0)
        gradient[:, :, i] = factor[1, i] * rest
        hessian[:, :, i, i] = factor[2, i] * rest
        for j in range(i + 1, d):
            others = np.prod(np.delete(factor[0], [i, j], axis=0), axis=0)
            mixed = factor[1, i] * factor[1, j] * others
            hessian[:, :, i, j] = mixed
            hessian[:, :, j, i] = mixed
    return value, gradient, hessian


class PolynomialField(FieldFunction):
    def __init__(self, exponents: Sequence[Sequence[int]], coeffs: Sequence[float]):
        self.exponents = np.atleast_2d(np.asarray(exponents, dtype=np.int64))
        self.coeffs = np.asarray(coeffs, dtype=float)

    @classmethod
    def from_terms(cls, terms: dict[tuple[int, ...], float]) -> "PolynomialField":
        return cls(list(terms.keys()), list(terms.values()))

    def ambient_jet(self, points: np.ndarray) -> Jet:
        v, g, h = monomial_jets(points, self.exponents)
        return Jet(
            v @ self.coeffs,
            np.einsum("nkd,k->nd", g, self.coeffs),
            np.einsum("nkde,k->nde", h, self.coeffs),
        )


def sphere_level_field(center: Sequence[float], radius: float) -> PolynomialField:
    """|x - center|^2 - radius^2: a circle in 2-D, a sphere in 3-D."""
    center = np.asarray(center, dtype=float)
    d = len(center)
    terms: dict[tuple[int, ...], float] = {}
    for i in range(d):
        square = [0] * d
        square[i] = 2
        linear = [0] * d
        linear[i] = 1
        terms[tuple(square)] = 1.0
        terms[tuple(linear)] = -2.0 * center[i]
    terms[(0,) * d] = float(center @ center) - radius**2
    return PolynomialField.from_terms(terms)


class SumField(FieldFunction):
    def __init__(
        self,
        fields: Sequence[FieldFunction],
        weights: Sequence[float],
        constant: float = 0.0,
    ):
        self.fields = list(fields)
        self.weights = [float(w) for w in weights]
        self.constant = float(constant)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        out = np.full(len(as_points(points)), self.constant)
        for w, f in zip(self.weights, self.fields):
            out = out + w * f.evaluate(points)
        return out

    def ambient_jet(self, points: np.ndarray) -> Jet:
        points = as_points(points)
        n, d = points.shape
        value = np.full(n, self.constant)
        gradient = np.zeros((n, d))
        hessian = np.zeros((n, d, d))
        for w, f in zip(self.weights, self.fields):
            jet = f.ambient_jet(points)
            value = value + w * jet.value
            gradient = gradient + w * jet.gradient
            hessian = hessian + w * jet.hessian
        return Jet(value, gradient, hessian)


class ProductField(FieldFunction):
    def __init__(self, left: FieldFunction, right: FieldFunction):
        self.left = left
        self.right = right

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.left.evaluate(points) * self.right.evaluate(points)

    def ambient_jet(self, points: np.ndarray) -> Jet:
        a = self.left.ambient_jet(points)
        b = self.right.ambient_jet(points)
        value = a.value * b.value
        gradient = a.value[:, None] * b.gradient + b.value[:, None] * a.gradient
        cross = a.gradient[:, :, None] * b.gradient[:, None, :]
        hessian = (
            a.value[:, None, None] * b.hessian
            + b.value[:, None, None] * a.hessian
            + cross
            + np.swapaxes(cross, 1, 2)
        )
        return Jet(value, gradient, hessian)


class ModelField(FieldFunction):
    """
    An element of a covariance model's basis span. Sampled paths and
    Cameron-Martin directions are both represented this way.
    """

    def __init__(
        self,
        model: "CovarianceModel",
        coefficients: np.ndarray,
        seed: Optional[int] = None,
    ):
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (model.rank,):
            raise ModelError(
                f"expected {model.rank} coefficients, got {coefficients.shape}",
                "fields",
                "ModelField",
            )
        self.model = model
        self.coefficients = coefficients
        self.seed = seed

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.model.basis_values(as_points(points)) @ self.coefficients

    def ambient_jet(self, points: np.ndarray) -> Jet:
        v, g, h = self.model.basis_jet(as_points(points))
        c = self.coefficients
        return Jet(
            v @ c, np.einsum("nrd,r->nd", g, c), np.einsum("nrde,r->nde", h, c)
        )


def project_to_sphere(jet: Jet, points: np.ndarray) -> Jet:
    """
    Intrinsic jet on the unit sphere from an ambient jet:
    grad = P df, Hess = P (D^2 f - (p.df) I) P with P = I - pp^T.
    """
    points = as_points(points)
    proj = np.eye(3)[None] - points[:, :, None] * points[:, None, :]
    radial = np.einsum("nd,nd->n", points, jet.gradient)
    gradient = np.einsum("nij,nj->ni", proj, jet.gradient)
    inner = jet.hessian - radial[:, None, None] * np.eye(3)[None]
    hessian = np.einsum("nij,njk,nkl->nil", proj, inner, proj)
    return Jet(jet.value, gradient, hessian)


def intrinsic_jet(
    f: FieldFunction, points: np.ndarray, domain: Optional[Domain] = None
) -> Jet:
    points = as_points(points)
    jet = f.ambient_jet(points)
    if domain is not None and domain.is_sphere:
        return project_to_sphere(jet, points)
    return jet


def evaluate_jet2(
    f: FieldFunction, p: np.ndarray, domain: Optional[Domain] = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """(value, gradient, hessian) at a single point, intrinsic on Sphere2."""
    jet = intrinsic_jet(f, p, domain)
    return float(jet.value[0]), jet.gradient[0], jet.hessian[0]


def sample_field(model: "CovarianceModel", seed: int) -> ModelField:
    """I.i.d. standard normal coefficients from a seeded generator."""
    rng = np.random.default_rng(int(seed))
    return ModelField(model, rng.standard_normal(model.rank), seed=int(seed))


def covariance_jet(
    model: "CovarianceModel", p, q, orders: tuple[int, int] = (0, 0)
) -> np.ndarray:
    return model.covariance_jet(p, q, orders)


def cm_inner(model: "CovarianceModel", h1: ModelField, h2: ModelField) -> float:
    return model.cm_inner(h1, h2)


def export_coefficients(field: ModelField, path: str | Path) -> Path:
    path = Path(path)
    record = {
        "model": field.model.metadata(),
        "seed": field.seed,
        "coefficients": [float(c) for c in field.coefficients],
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def load_coefficients(path: str | Path, model: "CovarianceModel") -> ModelField:
    record = json.loads(Path(path).read_text())
    if record["model"]["name"] != model.name:
        raise ModelError(
            f"coefficients belong to {record['model']['name']}, not {model.name}",
            "fields",
            "load_coefficients",
        )
    return ModelField(model, np.asarray(record["coefficients"]), seed=record["seed"])
