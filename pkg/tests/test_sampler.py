"""Tests for proposals, the Metropolis blocks, the chain driver, archives and checkpoints"""
import json
import numpy as np
import pytest
from backend.app.core.likelihood import SnowDensityModel
from backend.app.core.physics import N_THETA
from backend.app.exceptions import DatasetError, SamplerError
from backend.app.models import ChainConfig, CrossCovConfig
from backend.app.sampler import metropolis
from backend.app.sampler.archive import ARCHIVE_FORMAT, load_archive, save_archive
from backend.app.sampler.chain import MetropolisWithinGibbs, initial_state, make_streams, run_chain
from backend.app.sampler.metropolis import accept, log_normal_ratio, reflect
from backend.app.sampler.proposals import FIXED_VARIANCE, MIN_COV_SAMPLES, ProposalState, RunningCovariance
from tests.conftest import small_config


def build_model(dataset, config, threads=1):
    return SnowDensityModel(dataset, config.model, config.priors, threads=threads)


def assert_same_draws(a, b, exact=True):
    assert a.draws.keys() == b.draws.keys()
    for name in a.draws:
        if exact:
            assert np.array_equal(a.draws[name], b.draws[name]), name
        else:
            assert np.allclose(a.draws[name], b.draws[name]), name
    if exact:
        assert np.array_equal(a.loglik, b.loglik)
    else:
        assert np.allclose(a.loglik, b.loglik)


def test_accept_consumes_one_uniform():
    """Test rejected and impossible moves still advance the stream by one draw"""
    a, b = np.random.default_rng(0), np.random.default_rng(0)
    accept(-np.inf, a)
    b.uniform()
    assert a.uniform() == b.uniform()
    assert accept(0.0, np.random.default_rng(1))
    assert not accept(np.nan, np.random.default_rng(1))


@pytest.mark.parametrize("x,expected", [(10.0, 10.0), (3.0, 5.0), (31.0, 29.0), (4.0, 4.0)])
def test_reflect(x, expected):
    assert reflect(x, 4.0, 30.0) == pytest.approx(expected)


def test_log_normal_ratio_adds_jacobian():
    assert log_normal_ratio(-1.0, -2.0, 2.0, 1.0) == pytest.approx(1.0 + np.log(2.0))


def test_running_covariance_matches_numpy():
    rng = np.random.default_rng(2)
    values = rng.standard_normal((40, 3, N_THETA))
    running = RunningCovariance(3)
    for v in values:
        running.update(v)
    for site in range(3):
        assert np.allclose(running.covariance(site), np.cov(values[:, site].T), atol=1e-12)
        assert np.allclose(running.mean[site], values[:, site].mean(axis=0))


def test_proposal_uses_fixed_covariance_until_enough_samples():
    """Test the theta proposal switches to the empirical covariance after 2 x 12 samples"""
    rng = np.random.default_rng(3)
    proposals = ProposalState({"theta": (2,), "phi": (1,)}, 2, ChainConfig(n_iter=10, n_burn=5))
    assert np.array_equal(proposals.site_proposal_cov(0), FIXED_VARIANCE * np.eye(N_THETA))
    for _ in range(MIN_COV_SAMPLES):
        proposals.observe(rng.standard_normal((2, N_THETA)))
    assert not np.allclose(proposals.site_proposal_cov(0), FIXED_VARIANCE * np.eye(N_THETA))


def test_adapt_scales_steps_outside_band():
    """Test low acceptance shrinks by 0.8, high grows by 1.2 and untried blocks stay put"""
    proposals = ProposalState({"theta": (2,), "phi": (1,), "nu": (1,)}, 2, ChainConfig(n_iter=10, n_burn=5))
    nu_step = proposals.step("nu", 0)
    phi_step = proposals.step("phi", 0)
    for _ in range(10):
        proposals.record("theta", 0, False)
        proposals.record("phi", 0, True)
    proposals.adapt()
    assert proposals.site_scale.tolist() == pytest.approx([0.8, 1.0])
    assert proposals.step("phi", 0) == pytest.approx(1.2 * phi_step)
    assert proposals.step("nu", 0) == pytest.approx(nu_step)
    assert proposals.acceptance_report() == {"theta": 0.0, "phi": 1.0}


def test_make_streams_are_independent_and_reproducible():
    first, second = make_streams(5), make_streams(5)
    assert first["theta"].uniform() == second["theta"].uniform()
    assert first["gibbs"].uniform() != first["nu"].uniform()


def test_initial_state_at_prior_means(simulated, config):
    dataset, _ = simulated
    model = build_model(dataset, config)
    state = initial_state(model)
    assert state.theta.shape == (dataset.n_sites, N_THETA)
    assert np.all(state.theta == state.theta[0])
    assert np.isfinite(model.log_posterior(state))


def test_chain_is_deterministic(simulated, config):
    """Test the same seed reproduces every draw"""
    dataset, _ = simulated
    first = run_chain(build_model(dataset, config), config.chain)
    second = run_chain(build_model(dataset, config), config.chain)
    assert first.n_draws == (config.chain.n_iter - config.chain.n_burn) // config.chain.thin
    assert first.loglik.shape == (first.n_draws, dataset.n_obs)
    assert_same_draws(first, second)


def test_threads_do_not_change_draws(simulated, config):
    dataset, _ = simulated
    serial = run_chain(build_model(dataset, config, threads=1), config.chain)
    parallel = run_chain(build_model(dataset, config, threads=2), config.chain)
    assert_same_draws(serial, parallel)


def test_locality_check_passes_every_iteration(simulated):
    """Test local theta ratios agree with full posterior differences"""
    dataset, _ = simulated
    config = small_config()
    chain_config = config.chain.model_copy(update={"debug_check_every": 1})
    archive = run_chain(build_model(dataset, config), chain_config)
    assert archive.n_draws > 0


@pytest.mark.parametrize("overrides", [
    {"error_family": "normal"},
    {"hierarchical": False},
    {"weighted": False},
    {"smoothing": None},
    {"cross_covariance": CrossCovConfig(kind="independent")},
    {"cross_covariance": CrossCovConfig(kind="latent_factor", n_factors=2)},
])
def test_model_variants_run(simulated, overrides):
    dataset, _ = simulated
    config = small_config(**overrides)
    archive = run_chain(build_model(dataset, config), config.chain)
    assert np.all(np.isfinite(archive.loglik))
    if config.model.error_family == "normal":
        assert "nu" not in archive.acceptance
    if config.model.smoothing is None:
        assert archive.draws["beta"].shape[-1] == 0


def test_latent_factor_theta_moves(simulated):
    """Test site parameters mix when fewer factors than parameters are used"""
    dataset, _ = simulated
    config = small_config(cross_covariance=CrossCovConfig(kind="latent_factor", n_factors=2))
    chain_config = config.chain.model_copy(update={"n_iter": 120, "n_burn": 40})
    archive = run_chain(build_model(dataset, config), chain_config)
    assert archive.acceptance["theta"] > 0.0
    assert archive.acceptance["nugget"] > 0.0
    theta = archive.draws["theta"]
    assert np.all(theta.std(axis=0) > 0.0)
    assert np.all(np.isfinite(archive.draws["log_nugget"]))


def test_block_failures_carry_iteration_and_block(simulated, config, monkeypatch):
    """Test numerical failures inside a block surface as SamplerError"""
    dataset, _ = simulated

    def boom(*args, **kwargs):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(metropolis, "step_nu", boom)
    with pytest.raises(SamplerError) as info:
        run_chain(build_model(dataset, config), config.chain)
    assert info.value.iteration == 0
    assert info.value.block == "nu"


def test_archive_round_trip(simulated, config, tmp_path):
    dataset, _ = simulated
    archive = run_chain(build_model(dataset, config), config.chain, header={"provenance": {"seed": "3"}})
    path = save_archive(archive, tmp_path / "archive.npz")
    loaded = load_archive(path)
    assert_same_draws(archive, loaded)
    assert loaded.header["format"] == ARCHIVE_FORMAT
    assert loaded.header["provenance"] == {"seed": "3"}
    assert loaded.options == config.model
    assert np.allclose(loaded.site_coords, dataset.sites().coords)
    assert loaded.acceptance == pytest.approx(archive.acceptance)


def test_archive_with_wrong_format_is_rejected(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, loglik=np.zeros((1, 1)), __header__=np.array(json.dumps({"format": "something else"})))
    with pytest.raises(DatasetError):
        load_archive(path)


def test_checkpoint_resume_matches_uninterrupted_run(simulated, config, tmp_path):
    """Test stopping at a checkpoint and resuming reproduces the same chain"""
    dataset, _ = simulated
    full = run_chain(build_model(dataset, config), config.chain)

    checkpoint = tmp_path / "chain.checkpoint.npz"
    first_leg = config.chain.model_copy(update={"n_iter": 20, "checkpoint_every": 10})
    run_chain(build_model(dataset, config), first_leg, checkpoint_path=checkpoint)
    assert checkpoint.exists()

    chain = MetropolisWithinGibbs(build_model(dataset, config), config.chain)
    chain.load_checkpoint(checkpoint)
    assert chain.iteration == 20
    resumed = chain.run()
    assert_same_draws(full, resumed)
