"""Truncated observation model, scale hierarchy, priors and the full log-posterior"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence
import numpy as np
from scipy import stats
from backend.app.core.physics import N_THETA, SiteCovariates, design_basis, inverse_logit_density, site_geometry
from backend.app.core.smoothing import CoreSplineBasis, OrthogonalBasis, ProjectionCache, project_basis
from backend.app.core.spatial import CovarianceFactor, exp_correlation, jittered_cholesky, mgp_logpdf
from backend.app.core.state import ChainState, free_loading_mask
from backend.app.data.dataset import CoreDataset
from backend.app.models import ModelOptions, PriorTable

# Position in gamma of the hierarchical mean of each of the 12 site parameters
GAMMA_INDEX = np.array([0, 1, 2, 2, 2, 3, 4, 4, 4, 5, 6, 7])
N_GAMMA = 8

# Expeditions whose log dx spread is below this have eta fixed at zero
CONSTANT_DX_TOL = 1e-12


def mean_map_matrix() -> np.ndarray:
    """The 12 x 8 matrix M that repeats elements of gamma"""
    M = np.zeros((N_THETA, N_GAMMA))
    M[np.arange(N_THETA), GAMMA_INDEX] = 1.0
    return M


def hierarchical_mean_map(gamma: np.ndarray) -> np.ndarray:
    return np.asarray(gamma, dtype=float)[GAMMA_INDEX]


# ---------------------------------------------------------------------------
# Observation model
# ---------------------------------------------------------------------------

def log_trunc_t(y: np.ndarray, mu: np.ndarray, tau2: float, nu: float) -> np.ndarray:
    """Student-t log-density truncated below at zero"""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tau = np.sqrt(tau2)
    out = stats.t.logpdf(y, nu, loc=mu, scale=tau) - stats.t.logcdf(mu / tau, nu)
    return np.where(y > 0, out, -np.inf)


def log_trunc_normal(y: np.ndarray, mu: np.ndarray, tau2: float) -> np.ndarray:
    """Normal log-density truncated below at zero"""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tau = np.sqrt(tau2)
    out = stats.norm.logpdf(y, loc=mu, scale=tau) - stats.norm.logcdf(mu / tau)
    return np.where(y > 0, out, -np.inf)


def sample_trunc(mu: np.ndarray, tau: np.ndarray, nu: Optional[float],
                 rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the zero-truncated t (nu given) or normal (nu None)"""
    mu = np.asarray(mu, dtype=float)
    dist = stats.norm() if nu is None else stats.t(nu)
    lower = dist.cdf(-mu / tau)
    u = lower + rng.uniform(size=mu.shape) * (1.0 - lower)
    return mu + tau * dist.ppf(u)


# ---------------------------------------------------------------------------
# Scale hierarchy
# ---------------------------------------------------------------------------

def fixed_eta_mask(dx: np.ndarray, expedition_index: np.ndarray, n_expeditions: int,
                   weighted: bool = True) -> np.ndarray:
    """True for expeditions whose eta is held at zero"""
    fixed = np.ones(n_expeditions, dtype=bool)
    if not weighted:
        return fixed
    log_dx = np.log(dx)
    for m in range(n_expeditions):
        vals = log_dx[expedition_index == m]
        fixed[m] = vals.size < 2 or np.ptp(vals) < CONSTANT_DX_TOL
    return fixed


def scale_hierarchy_mean(log_tau2_group: np.ndarray, eta_group: np.ndarray,
                         dx: np.ndarray, expedition_index: np.ndarray) -> np.ndarray:
    """log tau2_m + eta_m log dx_i for every core"""
    return log_tau2_group[expedition_index] + eta_group[expedition_index] * np.log(dx)


def log_scale_hierarchy(log_tau2: np.ndarray, log_tau2_group: np.ndarray, eta_group: np.ndarray,
                        sigma2_tau: float, dx: np.ndarray, expedition_index: np.ndarray) -> float:
    """Sum over cores of the normal log-density of log tau2_i"""
    mean = scale_hierarchy_mean(log_tau2_group, eta_group, dx, expedition_index)
    return float(np.sum(stats.norm.logpdf(log_tau2, loc=mean, scale=np.sqrt(sigma2_tau))))


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

def log_uniform_inverse(phi: float, bounds: Sequence[float]) -> float:
    """Density of phi when 1 / phi ~ Unif(bounds)"""
    lo, hi = bounds
    if not phi > 0 or not lo <= 1.0 / phi <= hi:
        return -np.inf
    return -2.0 * np.log(phi) - np.log(hi - lo)


def log_prior_gamma(gamma: np.ndarray, priors: PriorTable) -> float:
    table = priors.gamma_priors()
    means = np.array([p.mean for p in table])
    sds = np.array([p.sd for p in table])
    return float(np.sum(stats.norm.logpdf(gamma, means, sds)))


def log_prior_nu(nu: float, priors: PriorTable) -> float:
    lo, hi = priors.nu_bounds
    return -np.log(hi - lo) if lo <= nu <= hi else -np.inf


def log_prior_inverse_gamma(x: np.ndarray, shape: float, scale: float) -> float:
    return float(np.sum(stats.invgamma.logpdf(x, shape, scale=scale)))


def log_prior_V(V: np.ndarray, priors: PriorTable) -> float:
    return float(stats.invwishart.logpdf(V, df=priors.v_df, scale=np.eye(N_THETA)))


def log_prior_loadings(params: np.ndarray, kind: str, priors: PriorTable) -> float:
    mask = free_loading_mask(kind, params.shape[1])
    return float(np.sum(stats.norm.logpdf(params[mask], 0.0, priors.loadings_sd)))


def log_prior_nugget(log_nugget: np.ndarray, priors: PriorTable) -> float:
    prior = priors.log_nugget_sd
    return float(np.sum(stats.norm.logpdf(log_nugget, prior.mean, prior.sd)))


def log_beta_field(beta_k: np.ndarray, sigma2: float, r_factor) -> float:
    """N(0, sigma2 R_beta) log-density of one coefficient field"""
    n = beta_k.size
    return -0.5 * (n * np.log(2 * np.pi * sigma2) + r_factor.logdet + r_factor.quad(beta_k) / sigma2)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class SnowDensityModel:
    """
    Likelihood and prior of the spatially varying densification model on one dataset

    Per-core terms are evaluated independently and reduced in core order, so
    results do not depend on the number of threads.
    """

    def __init__(self, dataset: CoreDataset, options: ModelOptions, priors: PriorTable,
                 threads: int = 1):
        self.dataset = dataset
        self.options = options
        self.priors = priors
        self.consts = options.constants
        self.threads = threads
        self.kind = options.cross_covariance.kind
        self.n_components = options.cross_covariance.n_components
        self.sites = dataset.sites()
        self.site_covs: List[SiteCovariates] = dataset.site_covariates()
        self.core_site = dataset.site_index
        self.core_exp = dataset.expedition_index
        self.n_expeditions = len(dataset.expeditions)
        self.dx = dataset.dx
        self.eta_fixed = fixed_eta_mask(self.dx, self.core_exp, self.n_expeditions, options.weighted)
        self.M = mean_map_matrix()

        self.spline = options.smoothing
        self.n_beta = self.spline.dim if self.spline is not None else 0
        self.bases: List[Optional[CoreSplineBasis]] = [
            CoreSplineBasis.build(core.depths, self.spline) if self.spline is not None else None
            for core in dataset.cores
        ]
        self.projections = ProjectionCache()

    # -- mean ---------------------------------------------------------------

    def projected_basis(self, core: int, theta_site: np.ndarray,
                        Z: Optional[np.ndarray] = None) -> Optional[OrthogonalBasis]:
        """Spline basis of a core projected off its design at theta_site"""
        if self.bases[core] is None:
            return None
        cached = self.projections.get(core, theta_site)
        if cached is not None:
            return cached
        if Z is None:
            cov = self.site_covs[self.core_site[core]]
            geom = site_geometry(theta_site, cov, self.consts)
            Z = design_basis(self.dataset.cores[core].depths, geom, cov, self.consts)
        basis = project_basis(Z, self.bases[core].H)
        self.projections.put(core, theta_site, basis)
        return basis

    def core_mean(self, core: int, theta_site: np.ndarray,
                  beta_site: Optional[np.ndarray]) -> Optional[np.ndarray]:
        """Mean density at the core's depths, or None outside the support"""
        cov = self.site_covs[self.core_site[core]]
        geom = site_geometry(theta_site, cov, self.consts)
        if not geom.in_support:
            return None
        Z = design_basis(self.dataset.cores[core].depths, geom, cov, self.consts)
        logit = theta_site[0] + Z @ geom.k
        if self.n_beta and beta_site is not None:
            logit = logit + self.projected_basis(core, theta_site, Z).h_perp @ beta_site
        return inverse_logit_density(logit, self.consts)

    # -- scales -------------------------------------------------------------

    def core_log_tau2(self, state: ChainState) -> np.ndarray:
        """Per-core log tau2; deterministic from the group parameters when not hierarchical"""
        if self.options.hierarchical:
            return state.log_tau2
        return scale_hierarchy_mean(state.log_tau2_group, state.eta_group, self.dx, self.core_exp)

    def observation_logpdf(self, y: np.ndarray, mu: np.ndarray, tau2: float, nu: float) -> np.ndarray:
        if self.options.error_family == "normal":
            return log_trunc_normal(y, mu, tau2)
        return log_trunc_t(y, mu, tau2, nu)

    # -- likelihood ---------------------------------------------------------

    def core_loglik(self, core: int, mu: Optional[np.ndarray], log_tau2: float, nu: float) -> np.ndarray:
        """Pointwise log-likelihood of one core given its mean profile"""
        y = self.dataset.cores[core].density
        if mu is None:
            return np.full(y.size, -np.inf)
        return self.observation_logpdf(y, mu, float(np.exp(log_tau2)), nu)

    def core_means(self, state: ChainState) -> List[Optional[np.ndarray]]:
        def one(core: int):
            site = self.core_site[core]
            beta = state.beta[site] if self.n_beta else None
            return self.core_mean(core, state.theta[site], beta)

        return self._map(one, range(self.dataset.n_cores))

    def pointwise_loglik(self, state: ChainState,
                         means: Optional[List[Optional[np.ndarray]]] = None) -> np.ndarray:
        """Length-N vector of observation log-likelihoods, in dataset order"""
        if means is None:
            means = self.core_means(state)
        log_tau2 = self.core_log_tau2(state)
        parts = self._map(lambda c: self.core_loglik(c, means[c], log_tau2[c], state.nu),
                          range(self.dataset.n_cores))
        return np.concatenate(parts)

    def site_loglik(self, site: int, theta_site: np.ndarray, beta_site: Optional[np.ndarray],
                    state: ChainState) -> float:
        """Sum of the observation terms of all cores at one site"""
        log_tau2 = self.core_log_tau2(state)
        total = 0.0
        for core in self.dataset.cores_at_site(site):
            mu = self.core_mean(core, theta_site, beta_site)
            if mu is None:
                return -np.inf
            total += float(np.sum(self.core_loglik(core, mu, log_tau2[core], state.nu)))
        return total

    def _map(self, fn, items):
        items = list(items)
        if self.threads <= 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # -- priors -------------------------------------------------------------

    def theta_mean(self, gamma: np.ndarray) -> np.ndarray:
        """Parameter-major mean of theta(S)"""
        return np.repeat(hierarchical_mean_map(gamma), self.sites.n)

    def theta_factor(self, state: ChainState) -> CovarianceFactor:
        return state.cross_covariance(self.kind).factor(self.sites.distances)

    def beta_factor(self, phi_beta: float):
        return jittered_cholesky(exp_correlation(self.sites.distances, phi_beta))

    def log_prior_covariance(self, state: ChainState) -> float:
        """Prior of V (separable) or the loadings, plus the decay parameters"""
        total = 0.0
        if self.kind == "separable":
            total += log_prior_V(state.V, self.priors)
        else:
            total += log_prior_loadings(state.loading_params, self.kind, self.priors)
            if state.log_nugget is not None:
                total += log_prior_nugget(state.log_nugget, self.priors)
        for phi in np.atleast_1d(state.phis):
            total += log_uniform_inverse(float(phi), self.priors.phi_inv_bounds)
        return total

    def log_prior_scales(self, state: ChainState) -> float:
        p = self.priors
        total = float(np.sum(stats.norm.logpdf(state.log_tau2_group, p.log_tau2_group.mean, p.log_tau2_group.sd)))
        free = ~self.eta_fixed
        if np.any(state.eta_group[~free] != 0.0):
            return -np.inf
        total += float(np.sum(stats.norm.logpdf(state.eta_group[free], p.eta_group.mean, p.eta_group.sd)))
        if self.options.hierarchical:
            total += log_prior_inverse_gamma(state.sigma2_tau, p.sigma2_tau.shape, p.sigma2_tau.scale)
            total += log_scale_hierarchy(state.log_tau2, state.log_tau2_group, state.eta_group,
                                         state.sigma2_tau, self.dx, self.core_exp)
        return total

    def log_prior_beta(self, state: ChainState, r_factor=None) -> float:
        if not self.n_beta:
            return 0.0
        lp = log_uniform_inverse(state.phi_beta, self.priors.phi_beta_inv_bounds)
        if not np.isfinite(lp):
            return -np.inf
        if r_factor is None:
            r_factor = self.beta_factor(state.phi_beta)
        p = self.priors.sigma2_beta
        lp += log_prior_inverse_gamma(state.sigma2_beta, p.shape, p.scale)
        for k in range(self.n_beta):
            lp += log_beta_field(state.beta[:, k], state.sigma2_beta[k], r_factor)
        return lp

    def log_posterior(self, state: ChainState) -> float:
        """Unnormalised log-posterior; -inf outside the support"""
        lp = log_prior_nu(state.nu, self.priors) + log_prior_gamma(state.gamma, self.priors)
        lp += self.log_prior_covariance(state)
        if not np.isfinite(lp):
            return -np.inf
        lp += self.log_prior_scales(state)
        lp += self.log_prior_beta(state)
        if not np.isfinite(lp):
            return -np.inf
        lp += mgp_logpdf(state.theta_vector(), self.theta_mean(state.gamma), self.theta_factor(state))
        ll = self.pointwise_loglik(state)
        if not np.all(np.isfinite(ll)):
            return -np.inf
        return float(lp + np.sum(ll))
