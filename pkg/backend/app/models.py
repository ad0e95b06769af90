"""Pydantic models for run configuration, reports and API request/response schemas"""
from typing import Dict, List, Literal, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base for configuration sections: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Model options
# ---------------------------------------------------------------------------

class PhysicalConstants(StrictModel):
    """Physical constants of the densification model"""
    rho_ice: float = Field(default=0.917, gt=0, description="Density of solid ice, g/cm^3")
    gas_const: float = Field(default=8.314, description="Ideal gas constant, J/(K mol)")

    @field_validator("gas_const")
    @classmethod
    def _fixed_gas_const(cls, value: float) -> float:
        if value != 8.314:
            raise ValueError("gas_const is fixed at 8.314")
        return value


class SplineSpec(StrictModel):
    """Shape of the smoothing basis h(x)"""
    degree: Literal[2, 3] = 2
    n_knots: int = Field(default=2, ge=0, le=3)
    knot_rule: Literal["quantile", "uniform"] = "quantile"

    @property
    def dim(self) -> int:
        """Basis dimension (constant column excluded)"""
        return self.degree + self.n_knots


CrossCovKind = Literal["independent", "separable", "latent_factor", "coregionalization"]


class CrossCovConfig(StrictModel):
    """Which cross-covariance structure is used for theta(S)"""
    kind: CrossCovKind = "separable"
    n_factors: Optional[int] = Field(default=None, ge=1, le=12)

    @model_validator(mode="after")
    def _check_factors(self) -> "CrossCovConfig":
        if self.kind == "latent_factor":
            if self.n_factors is None or self.n_factors >= 12:
                raise ValueError("latent_factor requires n_factors in 1..11")
        elif self.n_factors is not None and self.n_factors != self.n_components:
            raise ValueError(f"n_factors is implied by kind={self.kind}")
        return self

    @property
    def n_components(self) -> int:
        """Number of spatial correlation matrices R_j"""
        if self.kind == "separable":
            return 1
        if self.kind == "latent_factor":
            return int(self.n_factors)
        return 12


class ModelOptions(StrictModel):
    """One model variant: error model, cross-covariance and smoothing"""
    name: str = "smoothed_svsd"
    error_family: Literal["t", "normal"] = "t"
    weighted: bool = True
    hierarchical: bool = True
    cross_covariance: CrossCovConfig = Field(default_factory=CrossCovConfig)
    smoothing: Optional[SplineSpec] = Field(default_factory=SplineSpec)
    constants: PhysicalConstants = Field(default_factory=PhysicalConstants)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

class NormalPrior(StrictModel):
    mean: float
    sd: float = Field(gt=0)


class InverseGammaPrior(StrictModel):
    """IG(shape, scale) with density proportional to x^(-shape-1) exp(-scale/x)"""
    shape: float = Field(gt=0)
    scale: float = Field(gt=0)


class PriorTable(StrictModel):
    """Prior distributions of the hierarchical model (all overridable)"""
    gamma_alpha: NormalPrior = NormalPrior(mean=-0.5, sd=0.5)
    gamma_A1: NormalPrior = NormalPrior(mean=2.4, sd=0.2)
    gamma_A2: NormalPrior = NormalPrior(mean=6.35, sd=0.2)
    gamma_E1: NormalPrior = NormalPrior(mean=9.23, sd=0.2)
    gamma_E2: NormalPrior = NormalPrior(mean=9.97, sd=0.25)
    gamma_rho1: NormalPrior = NormalPrior(mean=0.0, sd=1.0)
    gamma_rho2: NormalPrior = NormalPrior(mean=0.0, sd=1.0)
    gamma_rho3: NormalPrior = NormalPrior(mean=0.0, sd=1.0)
    nu_bounds: Tuple[float, float] = (4.0, 30.0)
    # N(-7, 4) and N(-8, 4): the 4 is a variance
    log_tau2_group: NormalPrior = NormalPrior(mean=-7.0, sd=2.0)
    eta_group: NormalPrior = NormalPrior(mean=-8.0, sd=2.0)
    sigma2_tau: InverseGammaPrior = InverseGammaPrior(shape=2.1, scale=0.1)
    v_df: float = Field(default=13.0, gt=11.0)
    phi_inv_bounds: Tuple[float, float] = (10.0, 1000.0)
    sigma2_beta: InverseGammaPrior = InverseGammaPrior(shape=2.1, scale=0.1)
    phi_beta_inv_bounds: Tuple[float, float] = (10.0, 1000.0)
    loadings_sd: float = Field(default=1.0, gt=0)
    # log standard deviation of the per-parameter latent-factor nugget
    log_nugget_sd: NormalPrior = NormalPrior(mean=-3.0, sd=1.0)

    def gamma_priors(self) -> List[NormalPrior]:
        """Priors of the 8 hierarchical means in gamma order"""
        return [self.gamma_alpha, self.gamma_A1, self.gamma_A2, self.gamma_E1,
                self.gamma_E2, self.gamma_rho1, self.gamma_rho2, self.gamma_rho3]


# ---------------------------------------------------------------------------
# Chain, simulation and prediction
# ---------------------------------------------------------------------------

class ChainConfig(StrictModel):
    """MCMC run length, thinning and adaptation settings"""
    n_iter: int = Field(default=2000, ge=1)
    n_burn: int = Field(default=500, ge=0)
    thin: int = Field(default=1, ge=1)
    seed: int = 0
    adapt_window: int = Field(default=50, ge=1)
    univariate_band: Tuple[float, float] = (0.2, 0.6)
    multivariate_band: Tuple[float, float] = (0.15, 0.5)
    theta_repeats: int = Field(default=5, ge=1)
    log_every: int = Field(default=500, ge=0)
    debug_check_every: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_burn(self) -> "ChainConfig":
        if self.n_burn >= self.n_iter:
            raise ValueError("n_burn must be smaller than n_iter")
        return self


class ExpeditionSpec(StrictModel):
    """Synthetic expedition: averaging lengths drawn uniformly from dx_range"""
    name: str
    dx_range: Tuple[float, float] = (0.5, 0.5)


class TruthSpec(StrictModel):
    """Fixed ground-truth hyperparameters for synthetic data"""
    gamma: Optional[List[float]] = None
    v_scale: float = Field(default=0.01, gt=0)
    phi_inv: float = Field(default=300.0, gt=0)
    nu: float = Field(default=10.0, ge=4, le=30)
    log_tau2_group: float = -7.0
    eta_group: float = 0.0
    sigma2_tau: float = Field(default=0.1, gt=0)
    sigma2_beta: float = Field(default=0.05, gt=0)
    phi_beta_inv: float = Field(default=300.0, gt=0)


class SimulationConfig(StrictModel):
    """Generator settings for synthetic core datasets"""
    n_sites: int = Field(default=20, ge=1)
    shared_site_cores: int = Field(default=0, ge=0)
    n_obs_per_core: int = Field(default=150, ge=5)
    max_depth: float = Field(default=100.0, gt=0)
    lat_range: Tuple[float, float] = (-80.0, -70.0)
    lon_range: Tuple[float, float] = (0.0, 60.0)
    temperature_range: Tuple[float, float] = (225.0, 255.0)
    smb_range: Tuple[float, float] = (0.05, 0.4)
    expeditions: List[ExpeditionSpec] = Field(default_factory=lambda: [
        ExpeditionSpec(name="A", dx_range=(0.5, 0.5)),
        ExpeditionSpec(name="B", dx_range=(0.2, 1.0)),
    ])
    truth: TruthSpec = Field(default_factory=TruthSpec)
    draw_hyperparameters: bool = False
    noise_scale: float = Field(default=1.0, ge=0)
    max_retries: int = Field(default=200, ge=1)


class Location(StrictModel):
    """A prediction target with its covariates"""
    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=360)
    temperature: float = Field(gt=0)
    smb: float = Field(gt=0)
    expedition: Optional[str] = None
    dx: float = Field(default=1.0, gt=0)


class PredictionConfig(StrictModel):
    """Kriging and posterior-predictive settings"""
    grid_points: int = Field(default=2500, ge=1)
    depths: List[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0])
    locations: List[Location] = Field(default_factory=list)
    smoothing_at_new_sites: Literal["project", "none"] = "project"
    interval: float = Field(default=0.9, gt=0, lt=1)
    profile_core: Optional[str] = None
    max_draws: Optional[int] = Field(default=None, ge=1)


class PathsConfig(StrictModel):
    """Artifact file names, relative to the output directory unless absolute"""
    cores: str = "cores.csv"
    sites: str = "sites.csv"
    archive: str = "archive.npz"


class RunConfig(StrictModel):
    """Complete, schema-validated run configuration"""
    model: ModelOptions = Field(default_factory=ModelOptions)
    priors: PriorTable = Field(default_factory=PriorTable)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    prediction: PredictionConfig = Field(default_factory=PredictionConfig)
    compare: List[ModelOptions] = Field(default_factory=list)
    paths: PathsConfig = Field(default_factory=PathsConfig)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class WaicReport(BaseModel):
    """WAIC on the deviance scale with its effective-parameter penalty"""
    waic: float
    lppd: float
    p_waic: float = Field(ge=0)
    se: float = Field(ge=0)
    n_obs: int
    variance_warning: bool = False
    pointwise_elpd: List[float] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# API schemas
# ---------------------------------------------------------------------------

class RunRequest(BaseModel):
    """Request body shared by the run-style endpoints"""
    config_path: Optional[str] = Field(default=None, description="Run configuration JSON file")
    seed: Optional[int] = Field(default=None, description="Overrides the configured seed")
    out_dir: Optional[str] = Field(default=None, description="Overrides the output directory")


class SemivariogramRequest(RunRequest):
    n_bins: int = Field(default=12, ge=2, le=100)
    parameter: str = Field(default="alpha", description="Site quantity to analyse")


class RunResponse(BaseModel):
    """Artifacts produced by a pipeline step"""
    run_id: str
    artifacts: Dict[str, str]
    message: str


class WaicResponse(BaseModel):
    run_id: str
    waic: float
    p_waic: float
    se: float
    n_obs: int
    variance_warning: bool


class HealthCheckResponse(BaseModel):
    """Response model for health check"""
    status: str
    version: str
    threads: int
