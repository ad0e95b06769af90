"""Tests for distances, the cross-covariance family, factorizations and semivariograms"""
import numpy as np
import pytest
from scipy import stats
from backend.app.core.spatial import (
    CrossCovariance, EARTH_RADIUS_KM, GaussianFactor, KroneckerFactor, SemivariogramFit, SiteSet,
    build_cross_covariance, distance_matrix, empirical_semivariogram, exp_correlation,
    exponential_semivariogram, fit_semivariogram, great_circle, jittered_cholesky, mgp_logpdf,
)
from backend.app.core.state import loadings_from_params
from backend.app.exceptions import FactorizationError, SemivariogramFitError

COORDS = np.array([[-75.0, 10.0], [-76.0, 12.0], [-74.5, 15.0]])


def random_cross_covariance(kind: str, rng, n_factors: int = 3) -> CrossCovariance:
    if kind == "separable":
        A = 0.1 * rng.standard_normal((12, 12))
        V = A @ A.T + 0.01 * np.eye(12)
        return CrossCovariance(kind=kind, loadings=np.linalg.cholesky(V), phis=np.array([1 / 200.0]))
    q = {"independent": 12, "coregionalization": 12, "latent_factor": n_factors}[kind]
    params = 0.3 * rng.standard_normal((12, q))
    nugget = rng.uniform(1e-3, 1e-2, size=12) if kind == "latent_factor" else None
    return CrossCovariance(kind=kind, loadings=loadings_from_params(params, kind),
                           phis=rng.uniform(1 / 1000.0, 1 / 10.0, size=q), nugget=nugget)


def brute_force_covariance(cc: CrossCovariance, dist: np.ndarray) -> np.ndarray:
    """Entry-wise sum over components of lambda_pj lambda_qj exp(-phi_j d)"""
    n = dist.shape[0]
    out = np.zeros((12 * n, 12 * n))
    if cc.kind == "separable":
        comps = [(cc.V, cc.phis[0])]
    else:
        comps = [(np.outer(cc.loadings[:, j], cc.loadings[:, j]), cc.phis[j]) for j in range(cc.loadings.shape[1])]
    for p in range(12):
        for q in range(12):
            for i in range(n):
                for k in range(n):
                    out[p * n + i, q * n + k] = sum(B[p, q] * np.exp(-phi * dist[i, k]) for B, phi in comps)
                    if cc.nugget is not None and p == q and i == k:
                        out[p * n + i, q * n + k] += cc.nugget[p]
    return out


def test_great_circle_one_degree_on_equator():
    """Test a degree of longitude on the equator"""
    assert great_circle(np.array([0.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(EARTH_RADIUS_KM * np.pi / 180)


def test_great_circle_antipodal_and_quarter():
    assert great_circle(np.array([10.0, 20.0]), np.array([-10.0, -160.0])) == pytest.approx(np.pi * EARTH_RADIUS_KM)
    assert great_circle(np.array([-90.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(10007.5, abs=0.1)


def test_distance_matrix_symmetric_with_zero_diagonal():
    d = distance_matrix(COORDS)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0.0)
    assert np.all(d[~np.eye(3, dtype=bool)] > 0)


def test_exp_correlation_effective_range():
    """Test correlation falls to exp(-3) at 3 / phi"""
    phi = 1 / 250.0
    assert exp_correlation(np.array([3 / phi]), phi)[0] == pytest.approx(np.exp(-3))


@pytest.mark.parametrize("kind", ["separable", "independent", "latent_factor", "coregionalization"])
def test_cross_covariance_matches_brute_force(kind):
    """Test each kind against entry-wise assembly on three sites"""
    rng = np.random.default_rng(0)
    cc = random_cross_covariance(kind, rng)
    sites = SiteSet.from_coords(COORDS)
    assert np.allclose(build_cross_covariance(cc, sites), brute_force_covariance(cc, sites.distances), atol=1e-10)


def test_independent_kind_has_no_cross_parameter_covariance():
    rng = np.random.default_rng(1)
    cc = random_cross_covariance("independent", rng)
    marginal = cc.marginal()
    assert np.allclose(marginal, np.diag(np.diag(marginal)))


def test_latent_factor_nugget_gives_full_rank():
    """Test two factors plus the nugget give a nonsingular covariance"""
    rng = np.random.default_rng(4)
    cc = random_cross_covariance("latent_factor", rng, n_factors=2)
    sites = SiteSet.from_coords(COORDS)
    dense = cc.covariance(sites.distances)
    assert np.linalg.eigvalsh(dense).min() >= 0.5 * cc.nugget.min()
    assert cc.factor(sites.distances).jitter == 0.0
    assert np.allclose(cc.marginal(), cc.V + np.diag(cc.nugget))

    without = CrossCovariance(kind="latent_factor", loadings=cc.loadings, phis=cc.phis)
    assert np.linalg.matrix_rank(without.marginal()) == 2


def test_nugget_only_at_coincident_sites():
    rng = np.random.default_rng(5)
    cc = random_cross_covariance("latent_factor", rng, n_factors=2)
    without = CrossCovariance(kind="latent_factor", loadings=cc.loadings, phis=cc.phis)
    dist = distance_matrix(COORDS)[:2, 1:]      # rows 0, 1 against columns 1, 2
    diff = cc.covariance(dist) - without.covariance(dist)
    expected = np.kron(np.diag(cc.nugget), np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert np.allclose(diff, expected, atol=1e-15)


def test_separable_fast_path_matches_dense():
    """Test the Kronecker factor against dense linear algebra"""
    rng = np.random.default_rng(2)
    cc = random_cross_covariance("separable", rng)
    sites = SiteSet.from_coords(COORDS)
    factor = cc.factor(sites.distances)
    assert isinstance(factor, KroneckerFactor)
    dense = cc.covariance(sites.distances)
    assert np.allclose(factor.dense(), dense, atol=1e-12)

    b = rng.standard_normal(36)
    assert np.allclose(factor.solve(b), np.linalg.solve(dense, b), rtol=1e-8, atol=1e-8)
    B = rng.standard_normal((36, 4))
    assert np.allclose(factor.solve(B), np.linalg.solve(dense, B), rtol=1e-8, atol=1e-8)
    assert factor.logdet == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-8)
    assert factor.logpdf(b) == pytest.approx(stats.multivariate_normal(np.zeros(36), dense).logpdf(b), rel=1e-8)


def test_mgp_logpdf_matches_scipy():
    rng = np.random.default_rng(3)
    cc = random_cross_covariance("coregionalization", rng)
    sites = SiteSet.from_coords(COORDS)
    dense = cc.covariance(sites.distances)
    mean = rng.standard_normal(36)
    theta = mean + 0.1 * rng.standard_normal(36)
    expected = stats.multivariate_normal(mean, dense).logpdf(theta)
    assert mgp_logpdf(theta, mean, cc.factor(sites.distances)) == pytest.approx(expected, rel=1e-8)


def test_jittered_cholesky_rescues_singular_matrix():
    """Test a rank-deficient PSD matrix is factorized with jitter"""
    v = np.ones(5)
    factor = jittered_cholesky(np.outer(v, v))
    assert isinstance(factor, GaussianFactor)
    assert factor.jitter > 0


def test_jittered_cholesky_failure_context():
    """Test an indefinite matrix reports size, jitter and minimum eigenvalue"""
    matrix = np.diag([1.0, -1.0, 1.0])
    with pytest.raises(FactorizationError) as info:
        jittered_cholesky(matrix)
    record = info.value.to_record()
    assert record["size"] == 3
    assert record["min_eigenvalue"] == pytest.approx(-1.0)
    assert record["jitter"] > 0


def test_gaussian_factor_sampling_covariance():
    rng = np.random.default_rng(4)
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    factor = jittered_cholesky(cov)
    draws = np.array([factor.sample(rng) for _ in range(50000)])
    assert np.allclose(np.cov(draws.T), cov, atol=0.05)


def test_empirical_semivariogram_of_constant_field():
    sites = SiteSet.from_coords(np.column_stack([np.linspace(-80, -70, 30), np.linspace(0, 40, 30)]))
    centers, gammas, counts = empirical_semivariogram(np.full(30, 2.0), sites.distances, n_bins=6)
    assert centers.size > 0
    assert np.all(gammas == 0.0)
    assert np.all(counts >= 2)


def test_semivariogram_needs_enough_bins():
    """Test three sites cannot support a fit"""
    with pytest.raises(SemivariogramFitError):
        fit_semivariogram(np.array([0.1, 0.2, 0.3]), SiteSet.from_coords(COORDS))


def test_last_semivariogram_bin_includes_max_lag():
    """Test pairs exactly at the maximum lag are kept"""
    dist = np.array([[0.0, 2.0, 3.0, 10.0],
                     [2.0, 0.0, 7.0, 10.0],
                     [3.0, 7.0, 0.0, 8.0],
                     [10.0, 10.0, 8.0, 0.0]])
    values = np.array([0.0, 1.0, 2.0, 4.0])
    centers, gammas, counts = empirical_semivariogram(values, dist, n_bins=2, max_lag=10.0)
    assert counts.tolist() == [2, 4]
    assert centers[1] == pytest.approx(35.0 / 4)


@pytest.mark.parametrize("max_lag", [None, 100.0])
def test_semivariogram_of_coincident_sites_is_an_error(max_lag):
    sites = SiteSet.from_coords(np.tile(COORDS[:1], (8, 1)))
    values = np.random.default_rng(6).standard_normal(8)
    with pytest.raises(SemivariogramFitError):
        fit_semivariogram(values, sites, n_bins=4, max_lag=max_lag)


def test_semivariogram_fit_on_gaussian_field():
    """Test the fitted model is well formed on a simulated exponential field"""
    rng = np.random.default_rng(5)
    coords = np.column_stack([rng.uniform(-80, -70, 120), rng.uniform(0, 60, 120)])
    sites = SiteSet.from_coords(coords)
    values = jittered_cholesky(0.5 * exp_correlation(sites.distances, 1 / 300.0)).sample(rng)
    fit = fit_semivariogram(values, sites, n_bins=10)
    assert isinstance(fit, SemivariogramFit)
    assert fit.nugget >= 0 and fit.partial_sill >= 0 and fit.range_km > 0
    frame = fit.to_frame()
    assert list(frame.columns) == ["bin_center_km", "semivariance", "n_pairs", "fitted"]
    assert np.allclose(frame["fitted"], exponential_semivariogram(fit.bin_centers, fit.nugget,
                                                                  fit.partial_sill, fit.range_km))


@pytest.mark.slow
def test_semivariogram_recovers_range():
    """Test the median fitted range over replicates is within 30% of the truth"""
    rng = np.random.default_rng(6)
    true_range = 300.0
    estimates = []
    for _ in range(20):
        coords = np.column_stack([rng.uniform(-80, -70, 200), rng.uniform(0, 60, 200)])
        sites = SiteSet.from_coords(coords)
        values = jittered_cholesky(exp_correlation(sites.distances, 1 / true_range)).sample(rng)
        estimates.append(fit_semivariogram(values, sites, n_bins=15).range_km)
    assert abs(np.median(estimates) - true_range) / true_range < 0.3
