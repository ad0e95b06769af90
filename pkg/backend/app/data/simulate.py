"""Synthetic core datasets drawn from the generative model"""
import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple, Union
import numpy as np
from scipy import stats
from backend.app.core.likelihood import SnowDensityModel, fixed_eta_mask, hierarchical_mean_map, sample_trunc
from backend.app.core.physics import N_THETA, design_basis, inverse_logit_density, site_geometry
from backend.app.core.smoothing import CoreSplineBasis, orthogonalized_covariates
from backend.app.core.spatial import CrossCovariance, distance_matrix, exp_correlation, jittered_cholesky
from backend.app.core.state import ChainState, free_loading_mask, loadings_from_params
from backend.app.data.dataset import CoreDataset, CoreRecord
from backend.app.exceptions import SimulationError
from backend.app.models import CrossCovConfig, PriorTable, RunConfig, SimulationConfig
from backend.app.utils.logger import logger

TRUTH_FORMAT = "snowdensity-truth v1"


def _uniform(rng: np.random.Generator, bounds, size=None):
    lo, hi = bounds
    if hi > lo:
        return rng.uniform(lo, hi, size=size)
    return lo if size is None else np.full(size, float(lo))


def draw_hyperparameters(sim: SimulationConfig, priors: PriorTable, n_beta: int,
                         rng: np.random.Generator) -> Dict[str, Any]:
    """
    Scale, tail and spline hyperparameters: fixed truths from the config, or
    prior draws when draw_hyperparameters is set
    Per-expedition values are arrays over sim.expeditions; eta is zeroed later
    where the expedition's spacing is constant.
    """
    truth = sim.truth
    n_exp = len(sim.expeditions)
    values = {
        "nu": truth.nu,
        "log_tau2_group": np.full(n_exp, truth.log_tau2_group),
        "eta_group": np.full(n_exp, truth.eta_group),
        "sigma2_tau": truth.sigma2_tau,
        "sigma2_beta": np.full(n_beta, truth.sigma2_beta),
        "phi_beta": 1.0 / truth.phi_beta_inv,
    }
    if sim.draw_hyperparameters:
        values["nu"] = rng.uniform(*priors.nu_bounds)
        values["log_tau2_group"] = rng.normal(priors.log_tau2_group.mean, priors.log_tau2_group.sd, size=n_exp)
        values["eta_group"] = rng.normal(priors.eta_group.mean, priors.eta_group.sd, size=n_exp)
        values["sigma2_tau"] = float(stats.invgamma.rvs(priors.sigma2_tau.shape, scale=priors.sigma2_tau.scale,
                                                        random_state=rng))
        values["sigma2_beta"] = np.atleast_1d(stats.invgamma.rvs(
            priors.sigma2_beta.shape, scale=priors.sigma2_beta.scale, size=n_beta, random_state=rng))
        values["phi_beta"] = 1.0 / rng.uniform(*priors.phi_beta_inv_bounds)
    return values


def draw_gamma(sim: SimulationConfig, priors: PriorTable, rng: np.random.Generator) -> np.ndarray:
    table = priors.gamma_priors()
    if sim.draw_hyperparameters:
        return np.array([rng.normal(p.mean, p.sd) for p in table])
    if sim.truth.gamma is not None:
        return np.array(sim.truth.gamma, dtype=float)
    return np.array([p.mean for p in table])


def draw_covariance(cross: CrossCovConfig, sim: SimulationConfig, priors: PriorTable,
                    rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Generating values of the theta cross-covariance
    Separable: V ~ InvWishart(v_df, I) or v_scale I. Other kinds: free loading
    parameters ~ N(0, loadings_sd), log nugget sd from its prior (latent factor),
    or a diagonal of sqrt(v_scale) when the truth is fixed.
    """
    n_comp = cross.n_components
    draw = sim.draw_hyperparameters
    out: Dict[str, np.ndarray] = {
        "phis": 1.0 / rng.uniform(*priors.phi_inv_bounds, size=n_comp) if draw
        else np.full(n_comp, 1.0 / sim.truth.phi_inv),
    }
    if cross.kind == "separable":
        out["V"] = (stats.invwishart.rvs(df=priors.v_df, scale=np.eye(N_THETA), random_state=rng) if draw
                    else sim.truth.v_scale * np.eye(N_THETA))
        return out

    mask = free_loading_mask(cross.kind, n_comp)
    params = np.zeros((N_THETA, n_comp))
    if draw:
        params[mask] = rng.normal(0.0, priors.loadings_sd, size=int(mask.sum()))
    else:
        diag = np.arange(n_comp)
        params[diag, diag] = 0.5 * np.log(sim.truth.v_scale)
    out["loading_params"] = params
    if cross.kind == "latent_factor":
        prior = priors.log_nugget_sd
        out["log_nugget"] = (rng.normal(prior.mean, prior.sd, size=N_THETA) if draw
                             else np.full(N_THETA, prior.mean))
    return out


def cross_covariance_of(kind: str, values: Dict[str, np.ndarray]) -> CrossCovariance:
    """CrossCovariance from the values returned by draw_covariance"""
    if kind == "separable":
        loadings = np.linalg.cholesky(values["V"])
    else:
        loadings = loadings_from_params(values["loading_params"], kind)
    nugget = np.exp(2.0 * values["log_nugget"]) if "log_nugget" in values else None
    return CrossCovariance(kind=kind, loadings=loadings, phis=np.asarray(values["phis"], dtype=float),
                           nugget=nugget)


def _draw_theta(draw_prior: Callable[[], Tuple[np.ndarray, Dict[str, np.ndarray]]], kind: str,
                dist: np.ndarray, covs, consts, rng: np.random.Generator,
                max_retries: int) -> Tuple[np.ndarray, Dict[str, np.ndarray], np.ndarray]:
    """
    gamma, covariance values and theta(S) from the MGP, redrawn together until
    every site is inside the support
    """
    n = dist.shape[0]
    for attempt in range(1, max_retries + 1):
        gamma, values = draw_prior()
        factor = cross_covariance_of(kind, values).factor(dist)
        theta = hierarchical_mean_map(gamma) + factor.sample(rng).reshape(N_THETA, n).T
        if all(site_geometry(theta[s], covs[s], consts).in_support for s in range(n)):
            if attempt > 1:
                logger.info(f"theta field accepted after {attempt} draws")
            return gamma, values, theta
    raise SimulationError(f"no theta field inside the support after {max_retries} draws",
                          retries=max_retries)


def simulate_dataset(config: RunConfig, seed: int) -> Tuple[CoreDataset, Dict[str, Any]]:
    """
    Draw sites, covariates, hyperparameters, theta(S), beta fields, scales and
    truncated observations
    Returns:
        the dataset and a truth dictionary of every generating value
    """
    sim, options, priors = config.simulation, config.model, config.priors
    consts = options.constants
    rng = np.random.default_rng(seed)
    spec = options.smoothing
    n_beta = spec.dim if spec is not None else 0
    hyper = draw_hyperparameters(sim, priors, n_beta, rng)

    n_sites = sim.n_sites
    coords = np.column_stack([_uniform(rng, sim.lat_range, n_sites), _uniform(rng, sim.lon_range, n_sites)])
    temperature = _uniform(rng, sim.temperature_range, n_sites)
    smb = _uniform(rng, sim.smb_range, n_sites)
    dist = distance_matrix(coords)

    core_sites = np.concatenate([np.arange(n_sites), rng.integers(n_sites, size=sim.shared_site_cores)])
    n_cores = core_sites.size
    n_exp = len(sim.expeditions)
    core_exp = np.arange(n_cores) % n_exp
    dx = np.array([_uniform(rng, sim.expeditions[m].dx_range) for m in core_exp], dtype=float)

    records: List[CoreRecord] = []
    for i, s in enumerate(core_sites):
        depths = np.sort(rng.uniform(0.0, sim.max_depth, sim.n_obs_per_core))
        records.append(CoreRecord(
            core_id=f"core_{i:03d}", lat=float(coords[s, 0]), lon=float(coords[s, 1]),
            expedition=sim.expeditions[core_exp[i]].name, dx=float(dx[i]), depths=depths,
            density=np.empty(depths.size), temperature=float(temperature[s]), smb=float(smb[s]),
        ))
    skeleton = CoreDataset(records)
    covs = skeleton.site_covariates()

    kind = options.cross_covariance.kind
    fixed = None if sim.draw_hyperparameters else (draw_gamma(sim, priors, rng),
                                                   draw_covariance(options.cross_covariance, sim, priors, rng))

    def draw_prior():
        if fixed is not None:
            return fixed
        return draw_gamma(sim, priors, rng), draw_covariance(options.cross_covariance, sim, priors, rng)

    gamma, cov_values, theta = _draw_theta(draw_prior, kind, dist, covs, consts, rng, sim.max_retries)

    beta = np.zeros((n_sites, n_beta))
    if n_beta:
        r_factor = jittered_cholesky(exp_correlation(dist, hyper["phi_beta"]))
        for k in range(n_beta):
            beta[:, k] = np.sqrt(hyper["sigma2_beta"][k]) * r_factor.sample(rng)

    eta_fixed = fixed_eta_mask(dx, core_exp, n_exp, options.weighted)
    log_tau2_group = np.asarray(hyper["log_tau2_group"], dtype=float)
    eta_group = np.where(eta_fixed, 0.0, hyper["eta_group"])
    log_tau2 = log_tau2_group[core_exp] + eta_group[core_exp] * np.log(dx)
    if options.hierarchical:
        log_tau2 = log_tau2 + np.sqrt(hyper["sigma2_tau"]) * rng.standard_normal(n_cores)

    nu = hyper["nu"] if options.error_family == "t" else None
    for i, core in enumerate(records):
        s = core_sites[i]
        geom = site_geometry(theta[s], covs[s], consts)
        logit = theta[s, 0] + design_basis(core.depths, geom, covs[s], consts) @ geom.k
        if n_beta:
            H = CoreSplineBasis.build(core.depths, spec).H
            logit = logit + orthogonalized_covariates(core.depths, H, theta[s], covs[s], consts).h_perp @ beta[s]
        mu = np.atleast_1d(inverse_logit_density(logit, consts))
        tau = sim.noise_scale * np.exp(0.5 * log_tau2[i])
        core.density = mu.copy() if tau == 0 else sample_trunc(mu, np.full(mu.shape, tau), nu, rng)

    dataset = CoreDataset(records)
    truth = {
        "format": TRUTH_FORMAT,
        "seed": seed,
        "kind": kind,
        "gamma": gamma,
        **cov_values,
        "nu": hyper["nu"],
        "log_tau2_group": log_tau2_group,
        "eta_group": eta_group,
        "sigma2_tau": hyper["sigma2_tau"],
        "log_tau2": log_tau2,
        "sigma2_beta": hyper["sigma2_beta"],
        "phi_beta": hyper["phi_beta"],
        "theta": theta,
        "beta": beta,
        "site_coords": dataset.site_coords,
    }
    logger.info(f"Simulated {dataset.n_cores} cores at {dataset.n_sites} sites ({dataset.n_obs} measurements)")
    return dataset, truth


def simulate_observations(model: SnowDensityModel, state: ChainState,
                          rng: np.random.Generator) -> List[np.ndarray]:
    """
    Fresh densities at every core's measured depths given a full parameter state
    Raises:
        SimulationError: the state is outside the support at some core
    """
    means = model.core_means(state)
    log_tau2 = model.core_log_tau2(state)
    nu = state.nu if model.options.error_family == "t" else None
    out = []
    for core, mu in enumerate(means):
        if mu is None:
            raise SimulationError(f"core {core} is outside the support", retries=0)
        tau = np.full(mu.shape, np.exp(0.5 * log_tau2[core]))
        out.append(sample_trunc(mu, tau, nu, rng))
    return out


def save_truth(truth: Dict[str, Any], path: Union[str, Path]) -> Path:
    """Write the generating values as a JSON sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in truth.items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def load_truth(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in payload.items()}
