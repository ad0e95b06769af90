"""Metropolis and Metropolis-Hastings blocks of the sampler"""
from typing import List, Optional, Sequence
import numpy as np
from backend.app.core.likelihood import (
    SnowDensityModel, log_beta_field, log_prior_loadings, log_prior_nu, log_prior_nugget,
    log_uniform_inverse, scale_hierarchy_mean,
)
from backend.app.core.spatial import mgp_logpdf
from backend.app.core.state import ChainState, free_loading_mask
from backend.app.exceptions import FactorizationError
from backend.app.sampler.proposals import ProposalState
from backend.app.sampler.workspace import Workspace


def accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """Metropolis decision; one uniform is always consumed"""
    u = rng.uniform()
    return bool(np.isfinite(log_ratio) and np.log(u) < log_ratio)


def log_normal_ratio(target_new: float, target_old: float, x_new: float, x_old: float) -> float:
    """
    MH log ratio for a log-normal random walk on a positive scalar
    Targets are densities of x itself; the proposal asymmetry adds log(x_new / x_old).
    """
    return target_new - target_old + np.log(x_new) - np.log(x_old)


def reflect(x: float, lo: float, hi: float) -> float:
    """Fold a proposal back into [lo, hi]"""
    width = hi - lo
    y = np.mod(x - lo, 2 * width)
    return float(lo + (y if y <= width else 2 * width - y))


# ---------------------------------------------------------------------------
# Site parameters
# ---------------------------------------------------------------------------

def _site_means(model: SnowDensityModel, site: int, theta_site: np.ndarray,
                beta_site: Optional[np.ndarray]) -> Optional[List[np.ndarray]]:
    means = []
    for core in model.dataset.cores_at_site(site):
        mu = model.core_mean(core, theta_site, beta_site)
        if mu is None:
            return None
        means.append(mu)
    return means


def _loglik_with(model: SnowDensityModel, site: int, means: Sequence[np.ndarray],
                 state: ChainState) -> float:
    log_tau2 = model.core_log_tau2(state)
    cores = model.dataset.cores_at_site(site)
    return float(sum(np.sum(model.core_loglik(c, mu, log_tau2[c], state.nu)) for c, mu in zip(cores, means)))


def theta_prior_delta(ws: Workspace, site: int, delta: np.ndarray) -> float:
    """Change of the MGP log-density when theta at one site moves by delta"""
    idx = ws.site_indices(site)
    Q_block = ws.theta_Q[np.ix_(idx, idx)]
    return float(-delta @ ws.theta_Qr[idx] - 0.5 * delta @ Q_block @ delta)


def site_theta_log_ratio(model: SnowDensityModel, ws: Workspace, state: ChainState, site: int,
                         proposal: np.ndarray):
    """Local log acceptance ratio and the proposed means (None outside the support)"""
    beta = state.beta[site] if model.n_beta else None
    means = _site_means(model, site, proposal, beta)
    if means is None:
        return -np.inf, None
    ll_new = _loglik_with(model, site, means, state)
    ll_old = ws.site_loglik(site, state)
    return ll_new - ll_old + theta_prior_delta(ws, site, proposal - state.theta[site]), means


def step_site_theta(model: SnowDensityModel, state: ChainState, ws: Workspace,
                    proposals: ProposalState, site: int, rng: np.random.Generator) -> bool:
    """One blocked random-walk update of the 12 parameters at a site"""
    current = state.theta[site]
    chol = np.linalg.cholesky(proposals.site_proposal_cov(site))
    proposal = current + chol @ rng.standard_normal(current.size)
    log_ratio, means = site_theta_log_ratio(model, ws, state, site, proposal)
    accepted = accept(log_ratio, rng)
    if accepted:
        idx = ws.site_indices(site)
        delta = proposal - current
        ws.theta_resid[idx] += delta
        ws.theta_Qr += ws.theta_Q[:, idx] @ delta
        state.theta[site] = proposal
        for core, mu in zip(model.dataset.cores_at_site(site), means):
            ws.means[core] = mu
    proposals.record("theta", site, accepted)
    return accepted


def step_beta(model: SnowDensityModel, state: ChainState, ws: Workspace,
              proposals: ProposalState, rng: np.random.Generator) -> None:
    """Univariate random-walk updates of every spline coefficient at every site"""
    for site in range(model.sites.n):
        theta_site = state.theta[site]
        for k in range(model.n_beta):
            proposal = state.beta[site].copy()
            delta = proposals.step("beta", (site, k)) * rng.standard_normal()
            proposal[k] += delta
            means = _site_means(model, site, theta_site, proposal)
            log_ratio = -np.inf
            if means is not None:
                precision_beta = ws.beta_R_inv[site] @ state.beta[:, k]
                prior = -(delta * precision_beta + 0.5 * delta ** 2 * ws.beta_R_inv[site, site]) / state.sigma2_beta[k]
                log_ratio = _loglik_with(model, site, means, state) - ws.site_loglik(site, state) + prior
            accepted = accept(log_ratio, rng)
            if accepted:
                state.beta[site] = proposal
                for core, mu in zip(model.dataset.cores_at_site(site), means):
                    ws.means[core] = mu
            proposals.record("beta", (site, k), accepted)


# ---------------------------------------------------------------------------
# Scales and degrees of freedom
# ---------------------------------------------------------------------------

def step_log_tau2(model: SnowDensityModel, state: ChainState, ws: Workspace,
                  proposals: ProposalState, rng: np.random.Generator) -> None:
    """Log-normal MH for each core's tau2 under the scale hierarchy"""
    hier_mean = scale_hierarchy_mean(state.log_tau2_group, state.eta_group, model.dx, model.core_exp)
    sd = np.sqrt(state.sigma2_tau)
    for core in range(model.dataset.n_cores):
        lt_old = state.log_tau2[core]
        lt_new = lt_old + proposals.step("log_tau2", core) * rng.standard_normal()

        def target(lt: float) -> float:
            # density of tau2: normal on log tau2 with the 1/tau2 change of variables
            hier = -0.5 * ((lt - hier_mean[core]) / sd) ** 2 - lt
            return ws.core_loglik_sum(core, state, log_tau2=lt) + hier

        log_ratio = log_normal_ratio(target(lt_new), target(lt_old), np.exp(lt_new), np.exp(lt_old))
        accepted = accept(log_ratio, rng)
        if accepted:
            state.log_tau2[core] = lt_new
        proposals.record("log_tau2", core, accepted)


def _expedition_loglik(model: SnowDensityModel, ws: Workspace, state: ChainState, m: int) -> float:
    return float(sum(ws.core_loglik_sum(c, state) for c in np.flatnonzero(model.core_exp == m)))


def step_scale_groups(model: SnowDensityModel, state: ChainState, ws: Workspace,
                      proposals: ProposalState, rng: np.random.Generator) -> None:
    """Random-walk updates of log tau2_m and eta_m when scales are not hierarchical"""
    p = model.priors
    for m in range(model.n_expeditions):
        for block, prior, values in (("log_tau2_group", p.log_tau2_group, state.log_tau2_group),
                                     ("eta_group", p.eta_group, state.eta_group)):
            if block == "eta_group" and model.eta_fixed[m]:
                continue
            old = values[m]
            ll_old = _expedition_loglik(model, ws, state, m)
            values[m] = old + proposals.step(block, m) * rng.standard_normal()
            ll_new = _expedition_loglik(model, ws, state, m)
            prior_diff = (-0.5 * ((values[m] - prior.mean) / prior.sd) ** 2
                          + 0.5 * ((old - prior.mean) / prior.sd) ** 2)
            accepted = accept(ll_new - ll_old + prior_diff, rng)
            if not accepted:
                values[m] = old
            proposals.record(block, m, accepted)


def step_nu(model: SnowDensityModel, state: ChainState, ws: Workspace,
            proposals: ProposalState, rng: np.random.Generator) -> None:
    """Reflected random walk on the degrees of freedom"""
    lo, hi = model.priors.nu_bounds
    old = state.nu
    new = reflect(old + proposals.step("nu", 0) * rng.standard_normal(), lo, hi)
    ll_old = float(np.sum(ws.pointwise_loglik(state)))
    state.nu = new
    ll_new = float(np.sum(ws.pointwise_loglik(state)))
    log_ratio = ll_new - ll_old + log_prior_nu(new, model.priors) - log_prior_nu(old, model.priors)
    accepted = accept(log_ratio, rng)
    if not accepted:
        state.nu = old
    proposals.record("nu", 0, accepted)


# ---------------------------------------------------------------------------
# Covariance parameters
# ---------------------------------------------------------------------------

def _theta_field_logpdf(model: SnowDensityModel, state: ChainState) -> float:
    try:
        factor = model.theta_factor(state)
    except FactorizationError:
        return -np.inf
    return mgp_logpdf(state.theta_vector(), model.theta_mean(state.gamma), factor)


def step_phi(model: SnowDensityModel, state: ChainState, ws: Workspace,
             proposals: ProposalState, rng: np.random.Generator) -> None:
    """Log-normal MH for each spatial decay of theta(S)"""
    bounds = model.priors.phi_inv_bounds
    current_lp = mgp_logpdf(state.theta_vector(), model.theta_mean(state.gamma), ws.theta_factor)
    changed = False
    for j in range(state.phis.size):
        old = float(state.phis[j])
        new = old * np.exp(proposals.step("phi", j) * rng.standard_normal())
        prior_new = log_uniform_inverse(new, bounds)
        if np.isfinite(prior_new):
            state.phis[j] = new
            new_lp = _theta_field_logpdf(model, state)
            state.phis[j] = old
        else:
            new_lp = -np.inf
        log_ratio = log_normal_ratio(new_lp + prior_new, current_lp + log_uniform_inverse(old, bounds), new, old)
        accepted = accept(log_ratio, rng)
        if accepted:
            state.phis[j] = new
            current_lp = new_lp
            changed = True
        proposals.record("phi", j, accepted)
    if changed:
        ws.refresh_theta_prior(state)


def step_loadings(model: SnowDensityModel, state: ChainState, ws: Workspace,
                  proposals: ProposalState, rng: np.random.Generator) -> None:
    """Block random walk on the free loading parameters (non-separable kinds)"""
    mask = free_loading_mask(model.kind, state.loading_params.shape[1])
    old = state.loading_params.copy()
    current = (mgp_logpdf(state.theta_vector(), model.theta_mean(state.gamma), ws.theta_factor)
               + log_prior_loadings(old, model.kind, model.priors))
    state.loading_params = old.copy()
    state.loading_params[mask] += proposals.step("loadings", 0) * rng.standard_normal(int(mask.sum()))
    proposed = _theta_field_logpdf(model, state) + log_prior_loadings(state.loading_params, model.kind, model.priors)
    accepted = accept(proposed - current, rng)
    if accepted:
        ws.refresh_theta_prior(state)
    else:
        state.loading_params = old
    proposals.record("loadings", 0, accepted)


def step_nugget(model: SnowDensityModel, state: ChainState, ws: Workspace,
                proposals: ProposalState, rng: np.random.Generator) -> None:
    """Block random walk on the log nugget standard deviations of the latent-factor kind"""
    old = state.log_nugget.copy()
    current = (mgp_logpdf(state.theta_vector(), model.theta_mean(state.gamma), ws.theta_factor)
               + log_prior_nugget(old, model.priors))
    state.log_nugget = old + proposals.step("nugget", 0) * rng.standard_normal(old.size)
    proposed = _theta_field_logpdf(model, state) + log_prior_nugget(state.log_nugget, model.priors)
    accepted = accept(proposed - current, rng)
    if accepted:
        ws.refresh_theta_prior(state)
    else:
        state.log_nugget = old
    proposals.record("nugget", 0, accepted)


def step_phi_beta(model: SnowDensityModel, state: ChainState, ws: Workspace,
                  proposals: ProposalState, rng: np.random.Generator) -> None:
    """Log-normal MH for the common decay of the spline coefficient fields"""
    bounds = model.priors.phi_beta_inv_bounds

    def target(phi: float, factor) -> float:
        prior = log_uniform_inverse(phi, bounds)
        if not np.isfinite(prior):
            return -np.inf
        return prior + sum(log_beta_field(state.beta[:, k], state.sigma2_beta[k], factor)
                           for k in range(model.n_beta))

    old = state.phi_beta
    new = old * np.exp(proposals.step("phi_beta", 0) * rng.standard_normal())
    new_target = -np.inf
    if np.isfinite(log_uniform_inverse(new, bounds)):
        try:
            new_target = target(new, model.beta_factor(new))
        except FactorizationError:
            new_target = -np.inf
    log_ratio = log_normal_ratio(new_target, target(old, ws.beta_factor), new, old)
    accepted = accept(log_ratio, rng)
    if accepted:
        state.phi_beta = new
        ws.refresh_beta_prior(state)
    proposals.record("phi_beta", 0, accepted)
