from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    app_name: str = "Nodal Volume Lab"
    output_dir: str = Field(default="outputs")
    n_jobs: int = 1
    log_level: str = "INFO"

    # Numerical policy. Tolerances are relative to the field scale.
    regularity_floor: float = 1e-6
    projection_tol: float = 1e-9
    bisection_steps: int = 48
    projection_max_iter: int = 8
    minimality_threshold: float = 1e-3
    conditioning_eps: float = 1e-12
    eigen_clamp: float = 1e-10
    eigen_fail: float = 1e-6
    tube_factor: float = 4.0
    mc_samples: int = 10_000
    quadrature_resolution: int = 32
    morse_floor: float = 1e-6
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    seed_sweep_steps: int = 64
    seed_threshold: float = 0.5
    density_floor: float = 1e-4
    # ensembles spreading less than this (relative) are one value up to mesh error
    degenerate_spread: float = 1e-3
    model_check_points: int = 100
    model_check_seed: int = 20240917

    model_config = SettingsConfigDict(
        env_prefix="NODAL_LAB_", env_file=".env", env_file_encoding="utf-8"
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
