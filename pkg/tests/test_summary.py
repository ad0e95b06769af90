"""Tests for posterior summary tables"""
import numpy as np
import pytest
from scipy.special import expit
from backend.app.core.physics import HL_A, RHO_BOUNDS, THETA_NAMES
from backend.app.inference.summary import (
    parameter_correlations, profile_comparison, site_medians, summarize,
)
from tests.conftest import make_archive

SITES = np.array([[-75.0, 10.0], [-76.0, 12.0], [-74.5, 15.0]])


def test_single_draw_summary_is_degenerate():
    archive = make_archive(SITES, n_draws=1)
    table = summarize(archive).set_index("parameter")
    assert np.all(table["sd"] == 0.0)
    assert np.allclose(table["q05"], table["mean"])
    assert np.allclose(table["q95"], table["median"])


def test_summary_rows():
    """Test hierarchical means, hyperparameters and effective ranges are all reported"""
    archive = make_archive(SITES, n_draws=5)
    table = summarize(archive)
    expected = ["surface_density", "A1", "A2", "E1", "E2", "rho1", "rho2", "rho3", "nu", "sigma2_tau",
                "effective_range_km_1", "beta_effective_range_km"]
    assert table["parameter"].tolist() == expected
    ranges = table.set_index("parameter").loc["effective_range_km_1"]
    assert ranges["mean"] == pytest.approx(900.0)


def test_summary_back_transforms():
    archive = make_archive(SITES, n_draws=7)
    gamma = archive.draws["gamma"]
    table = summarize(archive).set_index("parameter")
    rho_ice = archive.options.constants.rho_ice
    assert table.loc["surface_density", "mean"] == pytest.approx(np.mean(rho_ice * expit(gamma[:, 0])))
    assert table.loc["E2", "median"] == pytest.approx(np.median(np.exp(gamma[:, 4])))
    lo, hi = RHO_BOUNDS[1]
    assert table.loc["rho2", "mean"] == pytest.approx(np.mean(lo + (hi - lo) * expit(gamma[:, 6])))
    assert np.isnan(table.loc["surface_density", "reference"])


def test_reference_quantile():
    """Test the reference estimate sits at the posterior median when draws straddle it evenly"""
    n = 21
    archive = make_archive(SITES, n_draws=n)
    archive.draws["gamma"][:, 1] = np.log(HL_A[0]) + np.linspace(-0.5, 0.5, n)
    row = summarize(archive).set_index("parameter").loc["A1"]
    assert row["reference"] == HL_A[0]
    assert abs(row["reference_quantile"] - 0.5) <= 1.0 / n


def test_site_medians_columns():
    archive = make_archive(SITES, n_draws=4)
    frame = site_medians(archive)
    assert list(frame.columns) == ["lat", "lon"] + list(THETA_NAMES)
    assert np.allclose(frame[list(THETA_NAMES)].to_numpy(), np.median(archive.draws["theta"], axis=0))
    assert frame["lat"].tolist() == SITES[:, 0].tolist()


def test_parameter_correlations_have_unit_diagonal():
    frame = parameter_correlations(make_archive(SITES, n_draws=3))
    assert frame.shape == (12, 12)
    assert np.allclose(np.diag(frame.to_numpy()), 1.0)
    assert np.allclose(frame.to_numpy(), frame.to_numpy().T)


def test_profile_comparison(simulated, config):
    dataset, _ = simulated
    archive = make_archive(dataset.site_coords, n_draws=3, options=config.model, n_cores=dataset.n_cores)
    core = dataset.cores[1]
    frame = profile_comparison(archive, dataset, core.core_id)
    assert list(frame.columns) == ["depth", "hl", "svsd", "smoothed_svsd", "observed"]
    assert np.array_equal(frame["observed"].to_numpy(), core.density)
    assert np.all(np.diff(frame["hl"]) >= 0)

    grid = profile_comparison(archive, dataset, core.core_id, depths=np.linspace(0, 80, 9))
    assert "observed" not in grid.columns
    assert len(grid) == 9
