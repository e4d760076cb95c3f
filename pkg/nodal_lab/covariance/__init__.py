from nodal_lab.covariance.base import CovarianceModel, ScaledModel
from nodal_lab.covariance.factory import MODEL_NAMES, build_model

__all__ = ["CovarianceModel", "ScaledModel", "MODEL_NAMES", "build_model"]
