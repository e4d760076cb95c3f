import enum
from typing import Any, Optional

from pydantic import BaseModel, Field, model_validator

from nodal_lab.config import get_settings
from nodal_lab.fields import (
    FieldFunction,
    PlaneWaveField,
    PolynomialField,
    SumField,
    sphere_level_field,
)
from nodal_lab.geometry import DomainKind


class Command(str, enum.Enum):
    VOLUME = "volume"
    VARIATION = "variation"
    KACRICE = "kacrice"
    MORSE_PROFILE = "morse-profile"
    SEGMENT_SCAN = "segment-scan"
    ENSEMBLE = "ensemble"
    DENSITY = "density"


class ModelName(str, enum.Enum):
    ARITHMETIC_WAVE = "ArithmeticWave"
    BERRY_WAVE = "BerryWave"
    BARGMANN_FOCK = "BargmannFock"
    KOSTLAN = "Kostlan"
    SPECTRAL_SUM = "SpectralSum"
    LINEAR_FIELD = "LinearField"
    SPHERICAL_HARMONIC = "SphericalHarmonic"
    ATOM_DEMO = "AtomDemo"


class OutputFormat(str, enum.Enum):
    JSON = "json"
    CSV = "csv"


class FixtureKind(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    PLANE_WAVES = "plane_waves"
    CIRCLE = "circle"


class DomainSpec(BaseModel):
    kind: DomainKind = DomainKind.FLAT_TORUS
    dims: int = Field(default=2, ge=2, le=3)
    extents: Optional[list[float]] = None
    origin: Optional[list[float]] = None


class ModelSpec(BaseModel):
    name: ModelName
    params: dict[str, Any] = Field(default_factory=dict)


class FixtureSpec(BaseModel):
    """
    Deterministic test function. Polynomials take exponent rows and
    coefficients, plane waves take wave vectors with cosine and sine
    amplitudes, circles take a centre and radius.
    """

    kind: FixtureKind
    exponents: list[list[int]] = Field(default_factory=list)
    coeffs: list[float] = Field(default_factory=list)
    wave_vectors: list[list[float]] = Field(default_factory=list)
    cos_coeffs: list[float] = Field(default_factory=list)
    sin_coeffs: list[float] = Field(default_factory=list)
    center: list[float] = Field(default_factory=list)
    radius: float = Field(default=1.0, gt=0)
    constant: float = 0.0

    @model_validator(mode="after")
    def validate_shape(self) -> "FixtureSpec":
        if self.kind == FixtureKind.POLYNOMIAL:
            if not self.exponents or len(self.exponents) != len(self.coeffs):
                raise ValueError("polynomial needs matching exponents and coeffs")
        elif self.kind == FixtureKind.PLANE_WAVES:
            if not self.wave_vectors or len(self.wave_vectors) != len(self.cos_coeffs):
                raise ValueError("plane_waves needs matching wave_vectors and cos_coeffs")
            if self.sin_coeffs and len(self.sin_coeffs) != len(self.cos_coeffs):
                raise ValueError("sin_coeffs must match cos_coeffs")
        elif not self.center:
            raise ValueError("circle needs a center")
        return self

    def build(self) -> FieldFunction:
        if self.kind == FixtureKind.POLYNOMIAL:
            f = PolynomialField(self.exponents, self.coeffs)
        elif self.kind == FixtureKind.PLANE_WAVES:
            f = PlaneWaveField(
                self.wave_vectors, self.cos_coeffs, self.sin_coeffs or None
            )
        else:
            f = sphere_level_field(self.center, self.radius)
        if self.constant:
            return SumField([f], [1.0], constant=self.constant)
        return f


class RunConfig(BaseModel):
    command: Optional[Command] = None
    domain: DomainSpec = Field(default_factory=DomainSpec)
    model: Optional[ModelSpec] = None
    field: Optional[FixtureSpec] = None
    direction: Optional[FixtureSpec] = None
    resolution: int = Field(default=128, gt=0)
    samples: int = Field(default=1000, ge=2)
    seed: int = Field(default=0, ge=0, lt=2**64)
    delta: Optional[float] = Field(default=None, gt=0)
    fd: bool = False
    derivative: bool = False
    fd_epsilon: Optional[float] = Field(default=None, gt=0)
    refinements: int = Field(default=3, ge=1, le=6)
    t_range: Optional[tuple[float, float]] = None
    t_resolution: int = Field(default=64, ge=4)
    ladder_depth: int = Field(default=8, ge=5)
    segments: int = Field(default=200, ge=1)
    quadrature_resolution: int = Field(
        default_factory=lambda: get_settings().quadrature_resolution, ge=8
    )
    mc_samples: int = Field(default_factory=lambda: get_settings().mc_samples, ge=10)
    output_dir: str = Field(default_factory=lambda: get_settings().output_dir)
    format: OutputFormat = OutputFormat.JSON
    n_jobs: int = Field(default_factory=lambda: get_settings().n_jobs, ge=1)

    @model_validator(mode="after")
    def validate_t_range(self) -> "RunConfig":
        if self.t_range is not None and not self.t_range[0] < self.t_range[1]:
            raise ValueError("t_range must be increasing")
        return self


class RunMetadata(BaseModel):
    package: str = "nodal-volume-lab"
    version: str
    command: str
    seed: int
    config: dict[str, Any]
    normalization: Optional[str] = None
    omissions: list[str] = Field(default_factory=list)


class VariationReport(BaseModel):
    interior_term: float
    boundary_term: float
    total: float
    fd_value: Optional[float] = None
    fd_gap: Optional[float] = None

    def with_oracle(self, fd_value: float) -> "VariationReport":
        return self.model_copy(
            update={"fd_value": fd_value, "fd_gap": abs(self.total - fd_value)}
        )


class KacRiceReport(BaseModel):
    quantity: str
    value: float
    deltas: list[float] = Field(default_factory=list)
    values: list[float] = Field(default_factory=list)
    drift: float = 0.0
    excised_pairs: int = 0
    variance: Optional[float] = None
    nodes: int = 0


class DivergenceReport(BaseModel):
    quantity: str
    status: str = Field(pattern="^(divergent|unresolved)$")
    deltas: list[float]
    values: list[float]
    growth_ratios: list[float]


class CriticalZeroRecord(BaseModel):
    point: list[float]
    t: float
    stratum: str
    index: int
    eigenvalues: list[float]
    certificate: float


class ExponentFit(BaseModel):
    side: str
    alpha: Optional[float]
    sign: int
    template: str
    log_r_squared: float
    plateau: float
    points: int


class EnsembleSummary(BaseModel):
    model: str
    base_seed: int
    requested: int
    values: list[float]
    component_counts: list[int]
    seeds: list[int]
    excluded_seeds: list[int] = Field(default_factory=list)
    mean: float
    variance: float
    std_error: float
    second_moment: float
    second_moment_std_error: float

    @property
    def n(self) -> int:
        return len(self.values)


class SegmentScanReport(BaseModel):
    model: str
    base_seed: int
    interval: tuple[float, float]
    segments: int
    root_counts: list[int]
    floor_violations: int
    stalled_seeds: int
    min_certificate: Optional[float] = None
    mean_roots_per_unit_t: float


class LawEstimate(BaseModel):
    """Atom at zero plus a kernel density for the nonzero values of V."""

    n: int
    zeros: int
    atom: float
    atom_interval: tuple[float, float]
    degenerate: bool
    mean: float
    support: Optional[tuple[float, float]] = None
    bandwidth: Optional[float] = None
    grid: list[float] = Field(default_factory=list)
    density: list[float] = Field(default_factory=list)
    max_bin_mass: dict[int, float] = Field(default_factory=dict)
    no_secondary_atom: Optional[bool] = None
    distinct: Optional[bool] = None
    centred_grid: list[float] = Field(default_factory=list)
    centred_density: list[float] = Field(default_factory=list)
    g: list[Optional[float]] = Field(default_factory=list)
    reconstruction: list[Optional[float]] = Field(default_factory=list)
    l1_gap: Optional[float] = None

    @property
    def continuous_mass(self) -> float:
        if not self.grid:
            return 0.0
        x, y = self.grid, self.density
        return float(sum(0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]) for i in range(len(x) - 1)))
