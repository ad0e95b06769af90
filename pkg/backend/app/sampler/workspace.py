"""Cached quantities shared by the sampler blocks"""
from typing import List, Optional
import numpy as np
from backend.app.core.likelihood import SnowDensityModel
from backend.app.core.spatial import CovarianceFactor, GaussianFactor
from backend.app.core.state import ChainState


class Workspace:
    """
    Per-core mean profiles, the precision of theta(S) and of the beta fields
    Each block that changes an input refreshes the matching cache.
    """

    def __init__(self, model: SnowDensityModel, state: ChainState):
        self.model = model
        self.means: List[Optional[np.ndarray]] = []
        self.theta_factor: CovarianceFactor = None
        self.theta_Q = np.empty((0, 0))
        self.theta_resid = np.empty(0)
        self.theta_Qr = np.empty(0)
        self.beta_factor: Optional[GaussianFactor] = None
        self.beta_R_inv = np.empty((0, 0))
        self.refresh_means(state)
        self.refresh_theta_prior(state)
        self.refresh_beta_prior(state)

    def refresh_means(self, state: ChainState) -> None:
        self.means = self.model.core_means(state)

    def refresh_theta_prior(self, state: ChainState) -> None:
        self.theta_factor = self.model.theta_factor(state)
        self.theta_Q = self.theta_factor.solve(np.eye(self.theta_factor.dim))
        self.theta_Q = 0.5 * (self.theta_Q + self.theta_Q.T)
        self.refresh_theta_residual(state)

    def refresh_theta_residual(self, state: ChainState) -> None:
        self.theta_resid = state.theta_vector() - self.model.theta_mean(state.gamma)
        self.theta_Qr = self.theta_Q @ self.theta_resid

    def refresh_beta_prior(self, state: ChainState) -> None:
        if not self.model.n_beta:
            return
        self.beta_factor = self.model.beta_factor(state.phi_beta)
        R_inv = self.beta_factor.solve(np.eye(self.beta_factor.dim))
        self.beta_R_inv = 0.5 * (R_inv + R_inv.T)

    def site_indices(self, site: int) -> np.ndarray:
        """Positions of a site's 12 parameters in the parameter-major vector"""
        n_sites = self.model.sites.n
        return np.arange(self.theta_Q.shape[0] // n_sites) * n_sites + site

    def core_loglik_sum(self, core: int, state: ChainState, log_tau2: Optional[float] = None,
                        nu: Optional[float] = None) -> float:
        lt = self.model.core_log_tau2(state)[core] if log_tau2 is None else log_tau2
        return float(np.sum(self.model.core_loglik(core, self.means[core], lt,
                                                   state.nu if nu is None else nu)))

    def site_loglik(self, site: int, state: ChainState) -> float:
        return float(sum(self.core_loglik_sum(c, state) for c in self.model.dataset.cores_at_site(site)))

    def pointwise_loglik(self, state: ChainState) -> np.ndarray:
        return self.model.pointwise_loglik(state, self.means)
