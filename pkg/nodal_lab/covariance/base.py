from abc import ABC, abstractmethod
from typing import Any

import numpy as np

from nodal_lab.config import get_settings
from nodal_lab.errors import ModelError, NonDegeneracySweepFailure
from nodal_lab.fields import ModelField, as_points
from nodal_lab.geometry import Domain, random_points, random_tangents
from nodal_lab.logger import logger


class CovarianceModel(ABC):
    """
    Finite-rank Gaussian field model. The basis {h_n} is orthonormal in the
    Cameron-Martin space, so K(p,q) = sum_n h_n(p) h_n(q) and every mixed
    derivative of K comes from basis jets.
    """

    name: str = "abstract"
    stationary: bool = False
    isotropic: bool = False

    def __init__(self, domain: Domain, params: dict[str, Any]):
        self.domain = domain
        self.params = dict(params)

    @property
    @abstractmethod
    def rank(self) -> int:
        pass

    @abstractmethod
    def basis_jet(
        self, points: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ambient basis values (N,R), gradients (N,R,D), Hessians (N,R,D,D)."""

    @abstractmethod
    def kernel(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Closed-form K(p_i, q_j) as an (Np, Nq) matrix."""

    def basis_values(self, points: np.ndarray) -> np.ndarray:
        return self.basis_jet(points)[0]

    def intrinsic_basis_jet(
        self, points: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        points = as_points(points)
        values, grads, hess = self.basis_jet(points)
        if not self.domain.is_sphere:
            return values, grads, hess
        eye = np.eye(3)
        proj = eye[None] - points[:, :, None] * points[:, None, :]
        radial = np.einsum("nd,nrd->nr", points, grads)
        grads = np.einsum("nij,nrj->nri", proj, grads)
        inner = hess - radial[:, :, None, None] * eye[None, None]
        hess = np.einsum("nij,nrjk,nkl->nril", proj, inner, proj)
        return values, grads, hess

    def covariance_jet(self, p, q, orders: tuple[int, int] = (0, 0)) -> np.ndarray:
        """
        Mixed derivative d_p^a d_q^b K(p,q) for orders (a, b) <= (2, 2),
        intrinsic on the sphere.
        """
        a, b = orders
        if not (0 <= a <= 2 and 0 <= b <= 2):
            raise ModelError(
                f"orders must be at most (2, 2), got {orders}",
                "fields",
                "covariance_jet",
            )
        jp = self.intrinsic_basis_jet(as_points(p))
        jq = self.intrinsic_basis_jet(as_points(q))
        left = jp[a][0]
        right = jq[b][0]
        return np.tensordot(left, right, axes=([0], [0]))

    def variance(self, points: np.ndarray) -> np.ndarray:
        values = self.basis_values(as_points(points))
        return np.sum(values**2, axis=1)

    def basis_element(self, n: int) -> ModelField:
        coefficients = np.zeros(self.rank)
        coefficients[n] = 1.0
        return ModelField(self, coefficients)

    def kernel_section(self, p) -> ModelField:
        """K(p, .) as an element of the span."""
        return ModelField(self, self.basis_values(as_points(p))[0])

    def cm_inner(self, h1: ModelField, h2: ModelField) -> float:
        for h in (h1, h2):
            if not isinstance(h, ModelField) or h.model is not self:
                raise ModelError(
                    "element is outside the span of this model's basis",
                    "fields",
                    "cm_inner",
                )
        return float(h1.coefficients @ h2.coefficients)

    def scaled(self, factor: float) -> "ScaledModel":
        return ScaledModel(self, factor)

    def metadata(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "params": self.params,
            "rank": self.rank,
            "normalization": self.normalization,
        }

    @property
    def normalization(self) -> str:
        return "unit variance"

    def validate(self) -> None:
        """Finite-rank identity and the (X(p), d_pX(v)) non-degeneracy sweep."""
        settings = get_settings()
        rng = np.random.default_rng(settings.model_check_seed)
        n = settings.model_check_points
        p = random_points(self.domain, n, rng)
        q = random_points(self.domain, n, rng)

        closed = self.kernel(p, q)
        finite = self.basis_values(p) @ self.basis_values(q).T
        scale = max(1.0, float(np.max(np.abs(closed))))
        gap = float(np.max(np.abs(closed - finite)))
        if gap > 1e-10 * scale:
            raise ModelError(
                f"{self.name}: finite-rank identity fails by {gap:.3e}",
                "fields",
                "build_model",
            )

        v = random_tangents(self.domain, p, rng)
        values, grads, _ = self.intrinsic_basis_jet(p)
        dv = np.einsum("nrd,nd->nr", grads, v)
        a = np.sum(values**2, axis=1)
        b = np.sum(values * dv, axis=1)
        c = np.sum(dv**2, axis=1)
        min_eig = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)
        ratio = float(np.min(min_eig / np.maximum(a, c)))
        if not ratio > 1e-10:
            raise ModelError(
                f"{self.name}: (X(p), d_pX(v)) is degenerate "
                f"(relative min eigenvalue {ratio:.3e})",
                "fields",
                "build_model",
            )
        logger.debug(
            f"{self.name} validated: identity gap {gap:.2e}, "
            f"min relative eigenvalue {ratio:.3e}"
        )

    def check_hessian_nondegeneracy(self) -> float:
        """
        Sweep (X(p), d_pX(v), Hess_pX(v,v)) over random (p, v) and return the
        smallest relative eigenvalue of its covariance.
        """
        settings = get_settings()
        rng = np.random.default_rng(settings.model_check_seed + 1)
        n = settings.model_check_points
        p = random_points(self.domain, n, rng)
        v = random_tangents(self.domain, p, rng)
        values, grads, hess = self.intrinsic_basis_jet(p)
        rows = np.stack(
            [
                values,
                np.einsum("nrd,nd->nr", grads, v),
                np.einsum("nrde,nd,ne->nr", hess, v, v),
            ],
            axis=1,
        )
        cov = np.einsum("nar,nbr->nab", rows, rows)
        eigs = np.linalg.eigvalsh(cov)
        ratio = float(np.min(eigs[:, 0] / eigs[:, -1]))
        if not ratio > 1e-10:
            raise NonDegeneracySweepFailure(
                f"{self.name}: (X, dX(v), Hess X(v,v)) is degenerate "
                f"(relative min eigenvalue {ratio:.3e})",
                "kacrice",
                "derivative_norm_sq_expectation",
            )
        return ratio


class ScaledModel(CovarianceModel):
    """The model with kernel c*K: every basis function scaled by sqrt(c)."""

    def __init__(self, base: CovarianceModel, factor: float):
        if not factor > 0:
            raise ModelError("scale factor must be positive", "fields", "scaled")
        super().__init__(base.domain, {**base.params, "scale": float(factor)})
        self.base = base
        self.factor = float(factor)
        self.name = base.name
        self.stationary = base.stationary
        self.isotropic = base.isotropic

    @property
    def rank(self) -> int:
        return self.base.rank

    def basis_jet(self, points):
        root = np.sqrt(self.factor)
        v, g, h = self.base.basis_jet(points)
        return root * v, root * g, root * h

    def basis_values(self, points):
        return np.sqrt(self.factor) * self.base.basis_values(points)

    def kernel(self, p, q):
        return self.factor * self.base.kernel(p, q)

    @property
    def normalization(self) -> str:
        return f"variance scaled by {self.factor}"
