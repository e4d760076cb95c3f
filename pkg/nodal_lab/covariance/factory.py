from typing import Any, Optional

from nodal_lab.covariance.base import CovarianceModel
from nodal_lab.covariance.sphere import (
    KostlanModel,
    LinearFieldModel,
    SphericalHarmonicModel,
)
from nodal_lab.covariance.spectral import (
    ArithmeticWaveModel,
    AtomDemoModel,
    BargmannFockModel,
    BerryWaveModel,
    SpectralSumModel,
)
from nodal_lab.errors import ModelError
from nodal_lab.geometry import Domain
from nodal_lab.logger import logger

MODEL_NAMES = (
    "ArithmeticWave",
    "BerryWave",
    "BargmannFock",
    "Kostlan",
    "SpectralSum",
    "LinearField",
    "SphericalHarmonic",
    "AtomDemo",
)


def build_model(
    name: str,
    params: Optional[dict[str, Any]],
    domain: Domain,
    validate: bool = True,
) -> CovarianceModel:
    params = {k: v for k, v in (params or {}).items() if v is not None}
    try:
        if name == "ArithmeticWave":
            model = ArithmeticWaveModel(domain, int(params.get("n", 1)))
        elif name == "BerryWave":
            model = BerryWaveModel(
                domain, float(params.get("k", 20.0)), int(params.get("truncation", 32))
            )
        elif name == "BargmannFock":
            model = BargmannFockModel(
                domain,
                int(params.get("truncation", 8)),
                float(params.get("length_scale", 1.0)),
            )
        elif name == "Kostlan":
            model = KostlanModel(domain, int(params.get("d", 2)))
        elif name == "SpectralSum":
            if "frequencies" not in params:
                raise ModelError(
                    "SpectralSum needs a frequency set", "fields", "build_model"
                )
            model = SpectralSumModel(
                domain,
                params["frequencies"],
                params.get("weights"),
                bool(params.get("normalize", True)),
            )
        elif name == "LinearField":
            model = LinearFieldModel(domain)
        elif name == "SphericalHarmonic":
            model = SphericalHarmonicModel(domain, int(params.get("l", 4)))
        elif name == "AtomDemo":
            model = AtomDemoModel(
                domain, int(params.get("n", 1)), float(params.get("sigma0", 3.0))
            )
        else:
            raise ModelError(
                f"Unsupported model: {name}. Valid names: {', '.join(MODEL_NAMES)}",
                "fields",
                "build_model",
            )
    except (TypeError, ValueError) as e:
        raise ModelError(f"invalid parameters for {name}: {e}", "fields", "build_model")

    if validate:
        model.validate()
    logger.info(f"Built model {name} with rank {model.rank} on {domain.kind.value}")
    return model
