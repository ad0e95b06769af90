"""Shared fixtures: small configurations, simulated datasets and hand-built archives"""
import numpy as np
import pytest
from backend.app.core.likelihood import hierarchical_mean_map
from backend.app.core.physics import N_THETA
from backend.app.core.state import ChainState
from backend.app.data.simulate import simulate_dataset
from backend.app.models import (
    ChainConfig, ExpeditionSpec, ModelOptions, PredictionConfig, RunConfig, SimulationConfig, SplineSpec,
)
from backend.app.sampler.archive import ChainArchive


def small_config(**model_overrides) -> RunConfig:
    """Five sites, six cores, a short chain"""
    model = ModelOptions(smoothing=SplineSpec(degree=2, n_knots=1)).model_copy(update=model_overrides)
    return RunConfig(
        model=model,
        chain=ChainConfig(n_iter=30, n_burn=10, thin=2, seed=3, adapt_window=5,
                          theta_repeats=1, log_every=0),
        simulation=SimulationConfig(
            n_sites=5, shared_site_cores=1, n_obs_per_core=25, max_depth=100.0,
            expeditions=[ExpeditionSpec(name="A", dx_range=(0.5, 0.5)),
                         ExpeditionSpec(name="B", dx_range=(0.2, 1.0))],
        ),
        prediction=PredictionConfig(grid_points=60, depths=[0.0, 10.0, 50.0], max_draws=4),
    )


def _optional(truth, name):
    return np.array(truth[name], dtype=float) if name in truth else None


def truth_state(truth) -> ChainState:
    """Chain state holding the generating values of a simulated dataset"""
    return ChainState(
        theta=np.array(truth["theta"], dtype=float),
        beta=np.array(truth["beta"], dtype=float),
        gamma=np.array(truth["gamma"], dtype=float),
        phis=np.array(truth["phis"], dtype=float),
        phi_beta=float(truth["phi_beta"]),
        sigma2_beta=np.array(truth["sigma2_beta"], dtype=float),
        nu=float(truth["nu"]),
        log_tau2=np.array(truth["log_tau2"], dtype=float),
        log_tau2_group=np.array(truth["log_tau2_group"], dtype=float),
        eta_group=np.array(truth["eta_group"], dtype=float),
        sigma2_tau=float(truth["sigma2_tau"]),
        V=_optional(truth, "V"),
        loading_params=_optional(truth, "loading_params"),
        log_nugget=_optional(truth, "log_nugget"),
    )


def make_archive(site_coords: np.ndarray, n_draws: int = 5, options: ModelOptions = None,
                 seed: int = 0, spread: float = 0.02, expeditions=("A", "B"),
                 n_cores: int = None) -> ChainArchive:
    """Archive of states scattered around the prior means"""
    options = options or ModelOptions()
    rng = np.random.default_rng(seed)
    n_sites = np.atleast_2d(site_coords).shape[0]
    n_cores = n_cores or n_sites
    n_beta = options.smoothing.dim if options.smoothing is not None else 0
    gamma0 = np.array([-0.5, 2.4, 6.35, 9.23, 9.97, 0.0, 0.0, 0.0])
    states = []
    for _ in range(n_draws):
        gamma = gamma0 + spread * rng.standard_normal(gamma0.size)
        theta = hierarchical_mean_map(gamma) + spread * rng.standard_normal((n_sites, N_THETA))
        states.append(ChainState(
            theta=theta,
            beta=0.01 * rng.standard_normal((n_sites, n_beta)),
            gamma=gamma,
            phis=np.array([1.0 / 300.0]),
            phi_beta=1.0 / 300.0,
            sigma2_beta=np.full(n_beta, 0.05),
            nu=10.0,
            log_tau2=np.full(n_cores, -7.0),
            log_tau2_group=np.full(len(expeditions), -7.0),
            eta_group=np.zeros(len(expeditions)),
            sigma2_tau=0.1,
            V=spread ** 2 * np.eye(N_THETA),
        ))
    arrays = [s.to_arrays() for s in states]
    draws = {name: np.stack([a[name] for a in arrays]) for name in arrays[0]}
    header = {
        "model": options.model_dump(mode="json"),
        "site_coords": np.atleast_2d(site_coords).tolist(),
        "expeditions": list(expeditions),
    }
    return ChainArchive(draws=draws, loglik=np.zeros((n_draws, 1)), header=header)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def simulated(config):
    """(dataset, truth) from the small configuration"""
    return simulate_dataset(config, seed=1)
