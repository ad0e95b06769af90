"""Tests for the truncated error models, the scale hierarchy, priors and the model likelihood"""
import itertools
import numpy as np
import pytest
from scipy import integrate, stats
from backend.app.core.likelihood import (
    GAMMA_INDEX, SnowDensityModel, fixed_eta_mask, hierarchical_mean_map, log_prior_gamma,
    log_trunc_normal, log_trunc_t, log_uniform_inverse, mean_map_matrix, sample_trunc,
)
from backend.app.models import PriorTable
from tests.conftest import small_config, truth_state


@pytest.mark.parametrize("mu,tau,nu", list(itertools.product([0.1, 0.4, 0.8], [0.01, 0.05, 0.2], [4.0, 10.0, 30.0])))
def test_truncated_t_integrates_to_one(mu, tau, nu):
    """Test the zero-truncated t density is normalized"""
    def density(y):
        return float(np.exp(log_trunc_t(np.array([y]), np.array([mu]), tau ** 2, nu))[0])

    left = integrate.quad(density, 0.0, mu, epsabs=1e-11, limit=200)[0]
    right = integrate.quad(density, mu, np.inf, epsabs=1e-11, limit=200)[0]
    assert left + right == pytest.approx(1.0, abs=1e-6)


def test_truncated_densities_vanish_below_zero():
    y = np.array([-0.1, 0.0])
    assert np.all(log_trunc_t(y, np.array([0.3, 0.3]), 0.01, 10.0) == -np.inf)
    assert np.all(log_trunc_normal(y, np.array([0.3, 0.3]), 0.01) == -np.inf)


@pytest.mark.parametrize("nu", [4.0, 10.0, 30.0])
def test_truncation_at_the_mean_doubles_the_density(nu):
    """Test mu = 0 keeps half the mass, adding log 2"""
    y = np.array([0.01, 0.05, 0.3])
    tau = 0.1
    expected = np.log(2.0) + stats.t.logpdf(y, nu, loc=0.0, scale=tau)
    assert np.allclose(log_trunc_t(y, np.zeros(3), tau ** 2, nu), expected, atol=1e-12)
    expected_normal = np.log(2.0) + stats.norm.logpdf(y, loc=0.0, scale=tau)
    assert np.allclose(log_trunc_normal(y, np.zeros(3), tau ** 2), expected_normal, atol=1e-12)


def test_truncation_negligible_twenty_scales_above_zero():
    tau = 0.02
    mu = np.full(3, 20 * tau)
    y = np.array([0.3, 0.4, 0.5])
    assert np.max(np.abs(log_trunc_normal(y, mu, tau ** 2) - stats.norm.logpdf(y, mu, tau))) < 1e-12
    assert np.max(np.abs(log_trunc_t(y, mu, tau ** 2, 30.0) - stats.t.logpdf(y, 30.0, mu, tau))) < 1e-12


def test_truncated_normal_matches_scipy():
    mu, tau = 0.05, 0.1
    y = np.linspace(0.01, 0.5, 7)
    expected = stats.truncnorm.logpdf(y, -mu / tau, np.inf, loc=mu, scale=tau)
    assert np.allclose(log_trunc_normal(y, np.full(y.size, mu), tau ** 2), expected, atol=1e-10)


@pytest.mark.parametrize("nu", [None, 5.0])
def test_sample_trunc_is_positive(nu):
    """Test truncated draws stay positive even for means near zero"""
    rng = np.random.default_rng(0)
    mu = np.full(5000, 0.02)
    draws = sample_trunc(mu, np.full(5000, 0.05), nu, rng)
    assert np.all(draws > 0)


def test_sample_trunc_centred_when_truncation_is_negligible():
    rng = np.random.default_rng(1)
    draws = sample_trunc(np.full(20000, 0.5), np.full(20000, 0.01), None, rng)
    assert draws.mean() == pytest.approx(0.5, abs=1e-3)
    assert draws.std() == pytest.approx(0.01, rel=0.05)


def test_mean_map_repeats_later_stages():
    """Test stages 2-4 share their hierarchical means"""
    M = mean_map_matrix()
    assert M.shape == (12, 8)
    assert np.all(M.sum(axis=1) == 1)
    gamma = np.arange(8.0)
    assert np.array_equal(hierarchical_mean_map(gamma), gamma[GAMMA_INDEX])
    assert np.array_equal(M @ gamma, hierarchical_mean_map(gamma))


def test_fixed_eta_mask():
    """Test eta is fixed for constant averaging lengths, single cores and unweighted models"""
    dx = np.array([0.5, 0.5, 0.2, 0.9, 0.3])
    exp = np.array([0, 0, 1, 1, 2])
    assert fixed_eta_mask(dx, exp, 3).tolist() == [True, False, True]
    assert fixed_eta_mask(dx, exp, 3, weighted=False).tolist() == [True, True, True]


def test_log_uniform_inverse():
    """Test the density of phi when 1/phi is uniform"""
    bounds = (10.0, 1000.0)
    assert log_uniform_inverse(1 / 5.0, bounds) == -np.inf
    assert log_uniform_inverse(1 / 2000.0, bounds) == -np.inf
    phi = 1 / 100.0
    assert log_uniform_inverse(phi, bounds) == pytest.approx(-2 * np.log(phi) - np.log(990.0))
    density = integrate.quad(lambda p: np.exp(log_uniform_inverse(p, bounds)), 1 / 1000.0, 1 / 10.0)[0]
    assert density == pytest.approx(1.0, rel=1e-6)


def test_log_prior_gamma_uses_prior_table():
    priors = PriorTable()
    gamma = np.array([p.mean for p in priors.gamma_priors()])
    expected = sum(stats.norm.logpdf(p.mean, p.mean, p.sd) for p in priors.gamma_priors())
    assert log_prior_gamma(gamma, priors) == pytest.approx(expected)


def test_model_loglik_finite_at_truth(simulated, config):
    """Test the pointwise log-likelihood at the generating values"""
    dataset, truth = simulated
    model = SnowDensityModel(dataset, config.model, config.priors)
    ll = model.pointwise_loglik(truth_state(truth))
    assert ll.shape == (dataset.n_obs,)
    assert np.all(np.isfinite(ll))
    assert np.isfinite(model.log_posterior(truth_state(truth)))


def test_threads_do_not_change_results(simulated, config):
    """Test parallel per-core evaluation reduces to the same values"""
    dataset, truth = simulated
    state = truth_state(truth)
    serial = SnowDensityModel(dataset, config.model, config.priors, threads=1).pointwise_loglik(state)
    parallel = SnowDensityModel(dataset, config.model, config.priors, threads=4).pointwise_loglik(state)
    assert np.array_equal(serial, parallel)


def test_core_mean_outside_support_is_none(simulated, config):
    dataset, truth = simulated
    model = SnowDensityModel(dataset, config.model, config.priors)
    theta = np.array(truth["theta"])[0].copy()
    theta[0] = 4.0
    assert model.core_mean(0, theta, None) is None
    state = truth_state(truth)
    state.theta[dataset.site_index[0]] = theta
    assert model.log_posterior(state) == -np.inf


def test_normal_error_family_changes_likelihood(simulated):
    dataset, truth = simulated
    t_cfg = small_config()
    n_cfg = small_config(error_family="normal")
    state = truth_state(truth)
    ll_t = SnowDensityModel(dataset, t_cfg.model, t_cfg.priors).pointwise_loglik(state)
    ll_n = SnowDensityModel(dataset, n_cfg.model, n_cfg.priors).pointwise_loglik(state)
    assert not np.allclose(ll_t, ll_n)


def test_non_hierarchical_scales_follow_groups(simulated):
    """Test per-core scales are deterministic when the hierarchy is off"""
    dataset, truth = simulated
    cfg = small_config(hierarchical=False)
    model = SnowDensityModel(dataset, cfg.model, cfg.priors)
    state = truth_state(truth)
    expected = state.log_tau2_group[dataset.expedition_index] + state.eta_group[dataset.expedition_index] * np.log(dataset.dx)
    assert np.allclose(model.core_log_tau2(state), expected)
