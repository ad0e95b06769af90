"""Tests for synthetic dataset generation"""
import numpy as np
import pytest
from backend.app.core.likelihood import SnowDensityModel
from backend.app.core.state import free_loading_mask
from backend.app.data.simulate import (
    TRUTH_FORMAT, cross_covariance_of, draw_covariance, load_truth, save_truth, simulate_dataset, simulate_observations,
)
from backend.app.exceptions import SimulationError
from backend.app.models import CrossCovConfig, ExpeditionSpec, TruthSpec
from tests.conftest import small_config, truth_state


def test_noise_free_data_equal_the_mean(config):
    """Test a zero noise scale returns the model mean profile at the truth"""
    config.simulation.noise_scale = 0.0
    dataset, truth = simulate_dataset(config, seed=2)
    model = SnowDensityModel(dataset, config.model, config.priors)
    theta, beta = np.asarray(truth["theta"]), np.asarray(truth["beta"])
    for c, core in enumerate(dataset.cores):
        s = dataset.site_index[c]
        assert np.allclose(core.density, model.core_mean(c, theta[s], beta[s]), atol=1e-10)


def test_simulated_dataset_shape(simulated, config):
    dataset, truth = simulated
    sim = config.simulation
    assert dataset.n_cores == sim.n_sites + sim.shared_site_cores
    assert dataset.n_sites == sim.n_sites
    assert all(core.depths.size == sim.n_obs_per_core for core in dataset.cores)
    assert all(np.all(np.diff(core.depths) >= 0) for core in dataset.cores)
    assert np.all(dataset.y > 0)
    assert dataset.expeditions == ["A", "B"]
    assert truth["format"] == TRUTH_FORMAT
    assert np.asarray(truth["theta"]).shape == (sim.n_sites, 12)
    assert np.asarray(truth["log_tau2"]).shape == (dataset.n_cores,)


def test_constant_dx_expedition_has_no_eta(simulated):
    dataset, truth = simulated
    assert np.all(dataset.dx[dataset.expedition_index == 0] == 0.5)
    assert truth["eta_group"][0] == 0.0


def test_simulation_is_deterministic(config):
    first, truth_a = simulate_dataset(config, seed=9)
    second, truth_b = simulate_dataset(config, seed=9)
    assert np.array_equal(first.y, second.y)
    assert np.array_equal(truth_a["theta"], truth_b["theta"])
    other, _ = simulate_dataset(config, seed=10)
    assert not np.array_equal(first.y, other.y)


def test_unreachable_support_raises():
    """Test a surface density above the first critical density exhausts the retries"""
    config = small_config()
    config.simulation.truth = TruthSpec(gamma=[5.0, 2.4, 6.35, 9.23, 9.97, 0.0, 0.0, 0.0])
    config.simulation.max_retries = 3
    with pytest.raises(SimulationError) as info:
        simulate_dataset(config, seed=0)
    assert info.value.to_record()["retries"] == 3


def test_prior_drawn_hyperparameters(config):
    """Test every hyperparameter is drawn from its prior when requested"""
    config.simulation.draw_hyperparameters = True
    config.simulation.max_retries = 2000
    config.simulation.expeditions = [ExpeditionSpec(name="A", dx_range=(0.5, 0.5)),
                                     ExpeditionSpec(name="B", dx_range=(0.2, 1.0)),
                                     ExpeditionSpec(name="C", dx_range=(0.3, 0.9))]
    _, truth = simulate_dataset(config, seed=4)
    lo, hi = config.priors.phi_inv_bounds
    assert lo <= 1.0 / truth["phis"][0] <= hi
    assert 4.0 <= truth["nu"] <= 30.0
    assert truth["log_tau2_group"].shape == (3,)
    assert np.unique(truth["log_tau2_group"]).size == 3
    assert truth["eta_group"][0] == 0.0
    assert truth["eta_group"][1] != truth["eta_group"][2]
    V = truth["V"]
    assert not np.allclose(V, V[0, 0] * np.eye(12))
    assert np.linalg.eigvalsh(V).min() > 0
    assert truth["sigma2_beta"].shape == (config.model.smoothing.dim,)
    assert np.unique(truth["sigma2_beta"]).size == config.model.smoothing.dim


@pytest.mark.parametrize("cross", [CrossCovConfig(kind="latent_factor", n_factors=2),
                                   CrossCovConfig(kind="coregionalization")])
def test_truth_field_follows_configured_kind(cross):
    config = small_config(cross_covariance=cross)
    _, truth = simulate_dataset(config, seed=6)
    assert truth["kind"] == cross.kind
    assert "V" not in truth
    assert truth["loading_params"].shape == (12, cross.n_components)
    assert truth["phis"].shape == (cross.n_components,)
    assert ("log_nugget" in truth) == (cross.kind == "latent_factor")
    state = truth_state(truth)
    assert np.allclose(state.cross_covariance(cross.kind).marginal(),
                       cross_covariance_of(cross.kind, truth).marginal())


@pytest.mark.parametrize("cross", [CrossCovConfig(kind="latent_factor", n_factors=3),
                                   CrossCovConfig(kind="independent")])
def test_prior_drawn_loadings(cross):
    """Test loading parameters are drawn on their free entries only"""
    config = small_config(cross_covariance=cross)
    config.simulation.draw_hyperparameters = True
    values = draw_covariance(cross, config.simulation, config.priors, np.random.default_rng(3))
    mask = free_loading_mask(cross.kind, cross.n_components)
    assert np.all(values["loading_params"][mask] != 0.0)
    assert np.all(values["loading_params"][~mask] == 0.0)
    lo, hi = config.priors.phi_inv_bounds
    assert np.all((lo <= 1.0 / values["phis"]) & (1.0 / values["phis"] <= hi))
    assert np.unique(values["phis"]).size == cross.n_components
    if cross.kind == "latent_factor":
        assert np.unique(values["log_nugget"]).size == 12


def test_fixed_truth_loadings_match_v_scale():
    config = small_config(cross_covariance=CrossCovConfig(kind="independent"))
    _, truth = simulate_dataset(config, seed=7)
    marginal = cross_covariance_of("independent", truth).marginal()
    assert np.allclose(marginal, config.simulation.truth.v_scale * np.eye(12))


def test_simulate_observations_at_the_truth(simulated, config):
    """Test redrawn densities are positive and sized like the dataset"""
    dataset, truth = simulated
    model = SnowDensityModel(dataset, config.model, config.priors)
    fresh = simulate_observations(model, truth_state(truth), np.random.default_rng(8))
    assert [y.size for y in fresh] == [core.depths.size for core in dataset.cores]
    assert all(np.all(y > 0) for y in fresh)
    assert not np.array_equal(np.concatenate(fresh), dataset.y)


def test_unsmoothed_model_has_no_coefficients():
    config = small_config(smoothing=None)
    _, truth = simulate_dataset(config, seed=5)
    assert np.asarray(truth["beta"]).shape == (config.simulation.n_sites, 0)


def test_truth_round_trip(simulated, tmp_path):
    _, truth = simulated
    path = save_truth(truth, tmp_path / "truth.json")
    loaded = load_truth(path)
    assert loaded["format"] == TRUTH_FORMAT
    assert np.allclose(loaded["theta"], truth["theta"])
    assert np.allclose(loaded["V"], truth["V"])
    assert loaded["nu"] == truth["nu"]
