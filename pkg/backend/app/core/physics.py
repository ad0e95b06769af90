"""Piecewise-linear (logit scale) snow densification model

Transforms of the 12 spatially varying parameters, Arrhenius rate constants,
critical depths and the four-stage design basis.
"""
from dataclasses import dataclass
from typing import Optional, Union
import numpy as np
from scipy.special import expit
from backend.app.exceptions import DomainError
from backend.app.models import PhysicalConstants

ArrayLike = Union[float, np.ndarray]

N_THETA = 12
N_STAGES = 4
THETA_NAMES = (
    "alpha",
    "log_A1", "log_A2", "log_A3", "log_A4",
    "log_E1", "log_E2", "log_E3", "log_E4",
    "t_rho1", "t_rho2", "t_rho3",
)

# Physically plausible intervals of the three critical densities, g/cm^3
RHO_BOUNDS = np.array([[0.42, 0.68], [0.68, 0.78], [0.78, 0.88]])

# Original two-stage constants
HL_A = (11.0, 575.0)
HL_E = (10160.0, 21400.0)
HL_RHO_CRIT = 0.55

DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class SiteCovariates:
    """10-m temperature (K) and surface mass balance (m w.e./yr) at a site"""
    temperature: float
    smb: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if not self.smb > 0:
            raise DomainError(f"smb must be positive, got {self.smb}")


@dataclass(frozen=True)
class UntransformedTheta:
    """Site parameters on their physical scales"""
    alpha: float
    A: np.ndarray
    E: np.ndarray
    rho_c: np.ndarray


@dataclass(frozen=True)
class StageGeometry:
    """Critical depths (m) and per-stage Arrhenius constants"""
    kappa: np.ndarray
    k: np.ndarray

    @property
    def in_support(self) -> bool:
        """kappa_1 >= 0, finite and weakly increasing"""
        return bool(
            np.all(np.isfinite(self.kappa))
            and np.all(np.isfinite(self.k))
            and self.kappa[0] >= 0.0
            and np.all(np.diff(self.kappa) >= 0.0)
        )


def logit_density(rho: ArrayLike, consts: PhysicalConstants = DEFAULT_CONSTANTS) -> ArrayLike:
    """log(rho / (rho_ice - rho)); defined on 0 < rho < rho_ice"""
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr <= 0) or np.any(rho_arr >= consts.rho_ice):
        raise DomainError(f"density outside (0, {consts.rho_ice}): {rho}")
    out = np.log(rho_arr) - np.log(consts.rho_ice - rho_arr)
    return float(out) if out.ndim == 0 else out


def inverse_logit_density(z: ArrayLike, consts: PhysicalConstants = DEFAULT_CONSTANTS) -> ArrayLike:
    """rho_ice * exp(z) / (1 + exp(z))"""
    out = consts.rho_ice * expit(np.asarray(z, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def untransform_theta(theta: np.ndarray) -> UntransformedTheta:
    """Map a transformed 12-vector to (alpha, A[4], E[4], rho_c[3])"""
    theta = np.asarray(theta, dtype=float)
    lo, hi = RHO_BOUNDS[:, 0], RHO_BOUNDS[:, 1]
    rho_c = lo + (hi - lo) * expit(theta[9:12])
    return UntransformedTheta(
        alpha=float(theta[0]),
        A=np.exp(theta[1:5]),
        E=np.exp(theta[5:9]),
        rho_c=rho_c,
    )


def transform_theta(alpha: float, A: np.ndarray, E: np.ndarray, rho_c: np.ndarray) -> np.ndarray:
    """Inverse of untransform_theta"""
    rho_c = np.asarray(rho_c, dtype=float)
    lo, hi = RHO_BOUNDS[:, 0], RHO_BOUNDS[:, 1]
    if np.any(rho_c <= lo) or np.any(rho_c >= hi):
        raise DomainError(f"critical densities outside their intervals: {rho_c}")
    t_rho = np.log(rho_c - lo) - np.log(hi - rho_c)
    return np.concatenate([[alpha], np.log(A), np.log(E), t_rho])


def arrhenius(A: ArrayLike, E: ArrayLike, T: ArrayLike,
              consts: PhysicalConstants = DEFAULT_CONSTANTS) -> ArrayLike:
    """Rate constant k = A exp(-E / (R T))"""
    A_arr, T_arr = np.asarray(A, dtype=float), np.asarray(T, dtype=float)
    if np.any(A_arr <= 0) or np.any(T_arr <= 0):
        raise DomainError("arrhenius requires A > 0 and T > 0")
    out = A_arr * np.exp(-np.asarray(E, dtype=float) / (consts.gas_const * T_arr))
    return float(out) if np.ndim(out) == 0 else out


def change_depths(alpha: float, k: np.ndarray, rho_c: np.ndarray, cov: SiteCovariates,
                  consts: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """
    Depths at which the mean profile reaches each critical density
    A negative first depth means the surface is already denser than rho_1;
    callers treat that as outside the prior support.
    """
    L = logit_density(rho_c, consts)
    kappa = np.empty(3)
    kappa[0] = (L[0] - alpha) / (consts.rho_ice * k[0])
    root_smb = np.sqrt(cov.smb)
    for j in (1, 2):
        kappa[j] = kappa[j - 1] + root_smb * (L[j] - L[j - 1]) / (consts.rho_ice * k[j])
    return kappa


def site_geometry(theta: np.ndarray, cov: SiteCovariates,
                  consts: PhysicalConstants = DEFAULT_CONSTANTS) -> StageGeometry:
    """Critical depths and rate constants implied by a site's parameters"""
    params = untransform_theta(theta)
    k = np.asarray(arrhenius(params.A, params.E, cov.temperature, consts))
    kappa = change_depths(params.alpha, k, params.rho_c, cov, consts)
    return StageGeometry(kappa=kappa, k=k)


def design_basis(x: ArrayLike, geom: StageGeometry, cov: SiteCovariates,
                 consts: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """
    Four piecewise-linear covariates at depths x
    Returns:
        array of shape (len(x), 4); stages 2-4 are scaled by 1/sqrt(SMB)
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k1, k2, k3 = geom.kappa
    scale = consts.rho_ice / np.sqrt(cov.smb)
    Z = np.empty((x.size, N_STAGES))
    Z[:, 0] = consts.rho_ice * np.minimum(x, k1)
    Z[:, 1] = scale * np.clip(x - k1, 0.0, k2 - k1)
    Z[:, 2] = scale * np.clip(x - k2, 0.0, k3 - k2)
    Z[:, 3] = scale * np.maximum(x - k3, 0.0)
    return Z


def mean_logit(x: ArrayLike, theta: np.ndarray, cov: SiteCovariates,
               consts: PhysicalConstants = DEFAULT_CONSTANTS,
               smooth_term: ArrayLike = 0.0,
               geom: Optional[StageGeometry] = None) -> np.ndarray:
    """alpha + z(x)^T k + smoothing contribution, on the logit scale"""
    if geom is None:
        geom = site_geometry(theta, cov, consts)
    Z = design_basis(x, geom, cov, consts)
    return float(theta[0]) + Z @ geom.k + np.asarray(smooth_term, dtype=float)


def mean_density(x: ArrayLike, theta: np.ndarray, cov: SiteCovariates,
                 consts: PhysicalConstants = DEFAULT_CONSTANTS,
                 smooth_term: ArrayLike = 0.0,
                 geom: Optional[StageGeometry] = None) -> np.ndarray:
    """Mean density profile in g/cm^3"""
    return inverse_logit_density(mean_logit(x, theta, cov, consts, smooth_term, geom), consts)


def herron_langway_profile(x: ArrayLike, surface_density: float, cov: SiteCovariates,
                           consts: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Original two-stage profile with its published constants"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k1 = arrhenius(HL_A[0], HL_E[0], cov.temperature, consts)
    k2 = arrhenius(HL_A[1], HL_E[1], cov.temperature, consts)
    z0 = logit_density(surface_density, consts)
    zc = logit_density(HL_RHO_CRIT, consts)
    kappa1 = max((zc - z0) / (consts.rho_ice * k1), 0.0)
    z = np.where(
        x < kappa1,
        z0 + consts.rho_ice * k1 * x,
        z0 + consts.rho_ice * k1 * kappa1 + consts.rho_ice * k2 * (x - kappa1) / np.sqrt(cov.smb),
    )
    return inverse_logit_density(z, consts)
