import itertools
import math

import numpy as np
from numpy.polynomial import legendre
from scipy import special

from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.errors import ModelError
from nodal_lab.fields import as_points, monomial_jets
from nodal_lab.geometry import Domain
from nodal_lab.logger import logger


def _require_sphere(domain: Domain, name: str) -> None:
    if not domain.is_sphere:
        raise ModelError(
            f"{name} is defined on Sphere2, got {domain.kind.value}",
            "fields",
            "build_model",
        )


class KostlanModel(CovarianceModel):
    """
    K(x,y) = (x.y)^d with basis sqrt(d!/alpha!) x^alpha over |alpha| = d.
    """

    name = "Kostlan"
    isotropic = True

    def __init__(self, domain: Domain, d: int):
        _require_sphere(domain, self.name)
        if d < 1:
            raise ModelError("Kostlan needs degree d >= 1", "fields", "build_model")
        super().__init__(domain, {"d": d})
        self.d = d
        self.exponents = np.array(
            [a for a in itertools.product(range(d + 1), repeat=3) if sum(a) == d],
            dtype=np.int64,
        )
        self.weights = np.sqrt(
            np.array(
                [
                    math.factorial(d) / np.prod([math.factorial(int(e)) for e in a])
                    for a in self.exponents
                ]
            )
        )

    @property
    def rank(self) -> int:
        return len(self.exponents)

    def basis_values(self, points):
        values, _, _ = monomial_jets(as_points(points), self.exponents)
        return values * self.weights

    def basis_jet(self, points):
        values, grads, hess = monomial_jets(as_points(points), self.exponents)
        w = self.weights
        return values * w, grads * w[None, :, None], hess * w[None, :, None, None]

    def kernel(self, p, q):
        return (as_points(p) @ as_points(q).T) ** self.d

    @property
    def normalization(self) -> str:
        return "unit variance on the unit sphere, K = (x.y)^d"


class LinearFieldModel(KostlanModel):
    """X(x) = a.x with a standard normal: Kostlan of degree one."""

    name = "LinearField"

    def __init__(self, domain: Domain):
        super().__init__(domain, 1)
        self.params = {}


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z**2)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


class SphericalHarmonicModel(CovarianceModel):
    """
    Random spherical harmonic of degree l, K(x,y) = P_l(x.y). The basis is
    built from zonal functions P_l(x.c_j) at Fibonacci centres, orthonormalised
    through the Gram matrix G_ij = P_l(c_i.c_j).
    """

    name = "SphericalHarmonic"
    isotropic = True

    def __init__(self, domain: Domain, l: int):
        _require_sphere(domain, self.name)
        if l < 1:
            raise ModelError("SphericalHarmonic needs l >= 1", "fields", "build_model")
        super().__init__(domain, {"l": l})
        self.l = l
        dim = 2 * l + 1
        self.centres = fibonacci_sphere(2 * dim)
        gram = special.eval_legendre(l, self.centres @ self.centres.T)
        eigvals, eigvecs = np.linalg.eigh(gram)
        top = np.argsort(eigvals)[::-1][:dim]
        kept = eigvals[top]
        if kept[-1] <= 1e-8 * kept[0]:
            raise ModelError(
                f"zonal Gram matrix for l={l} is rank deficient",
                "fields",
                "build_model",
            )
        self.mixing = eigvecs[:, top] / np.sqrt(kept)
        self._p0 = legendre.Legendre.basis(l)
        self._p1 = self._p0.deriv(1)
        self._p2 = self._p0.deriv(2)
        logger.debug(
            f"SphericalHarmonic l={l}: Gram spectrum [{kept[-1]:.3e}, {kept[0]:.3e}]"
        )

    @property
    def rank(self) -> int:
        return 2 * self.l + 1

    def basis_values(self, points):
        s = as_points(points) @ self.centres.T
        return self._p0(s) @ self.mixing

    def basis_jet(self, points):
        s = as_points(points) @ self.centres.T
        values = self._p0(s) @ self.mixing
        grads = np.einsum("nm,md,mr->nrd", self._p1(s), self.centres, self.mixing)
        hess = np.einsum(
            "nm,md,me,mr->nrde",
            self._p2(s),
            self.centres,
            self.centres,
            self.mixing,
            optimize=True,
        )
        return values, grads, hess

    def kernel(self, p, q):
        return special.eval_legendre(self.l, np.clip(as_points(p) @ as_points(q).T, -1, 1))

    @property
    def normalization(self) -> str:
        return "unit variance, K = P_l(x.y)"
