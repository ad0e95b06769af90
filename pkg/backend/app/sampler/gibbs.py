"""Closed-form conditional draws"""
from typing import Tuple
import numpy as np
import scipy.linalg as spl
from scipy import stats
from backend.app.core.likelihood import SnowDensityModel, mean_map_matrix, scale_hierarchy_mean
from backend.app.core.physics import N_THETA
from backend.app.core.spatial import jittered_cholesky
from backend.app.core.state import ChainState
from backend.app.models import InverseGammaPrior, NormalPrior, PriorTable
from backend.app.sampler.workspace import Workspace


def draw_normal(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + jittered_cholesky(cov).chol @ rng.standard_normal(mean.size)


def draw_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    return float(stats.invgamma.rvs(shape, scale=scale, random_state=rng))


def normal_conditional(precision_data: np.ndarray, shift_data: np.ndarray,
                       prior_mean: np.ndarray, prior_var: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior of a normal mean given data terms X^T Q X and X^T Q y
    Returns:
        (mean, covariance)
    """
    precision = precision_data + np.diag(1.0 / prior_var)
    cov = spl.inv(0.5 * (precision + precision.T))
    cov = 0.5 * (cov + cov.T)
    return cov @ (shift_data + prior_mean / prior_var), cov


# ---------------------------------------------------------------------------
# Hierarchical means
# ---------------------------------------------------------------------------

def gamma_conditional(theta_vector: np.ndarray, Q: np.ndarray, n_sites: int,
                      priors: PriorTable) -> Tuple[np.ndarray, np.ndarray]:
    """Normal conditional of gamma given theta(S) ~ N((M kron 1) gamma, Sigma) with Q = Sigma^-1"""
    X = np.kron(mean_map_matrix(), np.ones((n_sites, 1)))
    table = priors.gamma_priors()
    prior_mean = np.array([p.mean for p in table])
    prior_var = np.array([p.sd ** 2 for p in table])
    QX = Q @ X
    return normal_conditional(X.T @ QX, QX.T @ theta_vector, prior_mean, prior_var)


def gibbs_gamma(model: SnowDensityModel, state: ChainState, ws: Workspace,
                rng: np.random.Generator) -> np.ndarray:
    mean, cov = gamma_conditional(state.theta_vector(), ws.theta_Q, model.sites.n, model.priors)
    state.gamma = draw_normal(mean, cov, rng)
    ws.refresh_theta_residual(state)
    return state.gamma


# ---------------------------------------------------------------------------
# Scale hierarchy
# ---------------------------------------------------------------------------

def scale_group_conditional(log_tau2: np.ndarray, log_dx: np.ndarray, sigma2_tau: float,
                            eta_fixed: bool, intercept_prior: NormalPrior,
                            slope_prior: NormalPrior) -> Tuple[np.ndarray, np.ndarray]:
    """
    Regression of one expedition's log tau2_i on (1, log dx_i)
    Returns the conditional mean and covariance of (log tau2_m, eta_m), or of
    log tau2_m alone when eta is fixed at zero.
    """
    if eta_fixed:
        X = np.ones((log_tau2.size, 1))
        prior_mean = np.array([intercept_prior.mean])
        prior_var = np.array([intercept_prior.sd ** 2])
    else:
        X = np.column_stack([np.ones(log_tau2.size), log_dx])
        prior_mean = np.array([intercept_prior.mean, slope_prior.mean])
        prior_var = np.array([intercept_prior.sd ** 2, slope_prior.sd ** 2])
    return normal_conditional(X.T @ X / sigma2_tau, X.T @ log_tau2 / sigma2_tau, prior_mean, prior_var)


def sigma2_tau_conditional(residuals: np.ndarray, prior: InverseGammaPrior) -> Tuple[float, float]:
    """Inverse-gamma (shape, scale) of sigma2_tau given the hierarchy residuals"""
    return prior.shape + residuals.size / 2.0, prior.scale + 0.5 * float(residuals @ residuals)


def gibbs_scale_hierarchy(model: SnowDensityModel, state: ChainState,
                          rng: np.random.Generator) -> None:
    """Draw (log tau2_m, eta_m) per expedition, then sigma2_tau"""
    p = model.priors
    log_dx = np.log(model.dx)
    for m in range(model.n_expeditions):
        cores = model.core_exp == m
        mean, cov = scale_group_conditional(state.log_tau2[cores], log_dx[cores], state.sigma2_tau,
                                            bool(model.eta_fixed[m]), p.log_tau2_group, p.eta_group)
        draw = draw_normal(mean, cov, rng)
        state.log_tau2_group[m] = draw[0]
        state.eta_group[m] = draw[1] if draw.size > 1 else 0.0
    resid = state.log_tau2 - scale_hierarchy_mean(state.log_tau2_group, state.eta_group, model.dx, model.core_exp)
    shape, scale = sigma2_tau_conditional(resid, p.sigma2_tau)
    state.sigma2_tau = draw_inverse_gamma(shape, scale, rng)


# ---------------------------------------------------------------------------
# Coefficient-field variances and V
# ---------------------------------------------------------------------------

def sigma2_beta_conditional(beta_k: np.ndarray, R_inv: np.ndarray,
                            prior: InverseGammaPrior) -> Tuple[float, float]:
    return prior.shape + beta_k.size / 2.0, prior.scale + 0.5 * float(beta_k @ R_inv @ beta_k)


def gibbs_sigma2_beta(model: SnowDensityModel, state: ChainState, ws: Workspace,
                      rng: np.random.Generator) -> None:
    for k in range(model.n_beta):
        shape, scale = sigma2_beta_conditional(state.beta[:, k], ws.beta_R_inv, model.priors.sigma2_beta)
        state.sigma2_beta[k] = draw_inverse_gamma(shape, scale, rng)


def v_conditional(resid: np.ndarray, R_inv: np.ndarray, n_sites: int,
                  priors: PriorTable) -> Tuple[float, np.ndarray]:
    """Inverse-Wishart (df, scale) of V given parameter-major residuals of theta(S)"""
    E = resid.reshape(N_THETA, n_sites)
    S = np.eye(N_THETA) + E @ R_inv @ E.T
    return priors.v_df + n_sites, 0.5 * (S + S.T)


def gibbs_V(model: SnowDensityModel, state: ChainState, ws: Workspace,
            rng: np.random.Generator) -> np.ndarray:
    R_inv = ws.theta_factor.r.solve(np.eye(model.sites.n))
    df, scale = v_conditional(ws.theta_resid, R_inv, model.sites.n, model.priors)
    V = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    state.V = 0.5 * (V + V.T)
    ws.refresh_theta_prior(state)
    return state.V
