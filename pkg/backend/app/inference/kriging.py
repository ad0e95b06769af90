"""Conditional (kriging) draws of the site fields at new locations"""
from typing import Optional, Sequence, Tuple
import numpy as np
from backend.app.core.likelihood import hierarchical_mean_map
from backend.app.core.spatial import COINCIDENT_KM, CovarianceFactor, CrossCovariance, cross_distances, jittered_cholesky
from backend.app.sampler.archive import ChainArchive


def conditional_moments(cc: CrossCovariance, obs_coords: np.ndarray, values: np.ndarray,
                        mean: np.ndarray, new_coords: np.ndarray,
                        factor: Optional[CovarianceFactor] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-location conditional mean and covariance of a p-variate field
    Args:
        cc: cross-covariance of the field
        obs_coords: (n, 2) observed sites
        values: (n, p) field values at the observed sites
        mean: (p,) constant field mean
        new_coords: (m, 2) target locations
    Returns:
        means (m, p) and covariances (m, p, p)
    """
    obs_coords = np.atleast_2d(obs_coords)
    new_coords = np.atleast_2d(new_coords)
    n, p = values.shape
    m = new_coords.shape[0]
    if factor is None:
        factor = cc.factor(cross_distances(obs_coords, obs_coords))
    resid = (values - mean).T.ravel()

    sigma_no = cc.covariance(cross_distances(new_coords, obs_coords))   # (p m, p n)
    W = factor.solve(sigma_no.T)                                         # (p n, p m)
    cond_mean = (sigma_no @ factor.solve(resid)).reshape(p, m).T + mean
    marginal = cc.marginal()
    covs = np.empty((m, p, p))
    for j in range(m):
        idx = np.arange(p) * m + j
        c = marginal - sigma_no[idx] @ W[:, idx]
        covs[j] = 0.5 * (c + c.T)
    return cond_mean, covs


def krige_field(cc: CrossCovariance, obs_coords: np.ndarray, values: np.ndarray, mean: np.ndarray,
                new_coords: np.ndarray, rng: np.random.Generator,
                factor: Optional[CovarianceFactor] = None) -> np.ndarray:
    """One conditional draw per location; coincident locations copy the observed values"""
    new_coords = np.atleast_2d(new_coords)
    dist = cross_distances(new_coords, obs_coords)
    nearest = np.argmin(dist, axis=1)
    coincident = dist[np.arange(dist.shape[0]), nearest] <= COINCIDENT_KM

    out = np.empty((new_coords.shape[0], values.shape[1]))
    out[coincident] = values[nearest[coincident]]
    free = np.flatnonzero(~coincident)
    if free.size:
        cond_mean, covs = conditional_moments(cc, obs_coords, values, mean, new_coords[free], factor)
        for row, j in enumerate(free):
            z = rng.standard_normal(values.shape[1])
            out[j] = cond_mean[row] + jittered_cholesky(covs[row]).chol @ z
    return out


def beta_cross_covariance(sigma2: float, phi_beta: float) -> CrossCovariance:
    """A single coefficient field N(0, sigma2 R_beta) as a one-parameter separable family"""
    return CrossCovariance(kind="separable", loadings=np.array([[np.sqrt(sigma2)]]), phis=np.array([phi_beta]))


def _draw_indices(archive: ChainArchive, draws: Optional[Sequence[int]]) -> np.ndarray:
    return np.arange(archive.n_draws) if draws is None else np.asarray(draws, dtype=int)


def krige_theta(archive: ChainArchive, new_coords: np.ndarray, rng: np.random.Generator,
                draws: Optional[Sequence[int]] = None) -> np.ndarray:
    """theta(s_new) for each selected posterior draw, shape (draws, locations, 12)"""
    kind = archive.options.cross_covariance.kind
    obs = archive.site_coords
    out = []
    for d in _draw_indices(archive, draws):
        state = archive.state(d)
        mean = hierarchical_mean_map(state.gamma)
        out.append(krige_field(state.cross_covariance(kind), obs, state.theta, mean, new_coords, rng))
    return np.array(out)


def krige_beta(archive: ChainArchive, new_coords: np.ndarray, rng: np.random.Generator,
               draws: Optional[Sequence[int]] = None) -> np.ndarray:
    """beta_k(s_new) for each selected draw, shape (draws, locations, p)"""
    obs = archive.site_coords
    new_coords = np.atleast_2d(new_coords)
    out = []
    for d in _draw_indices(archive, draws):
        state = archive.state(d)
        n_beta = state.beta.shape[1]
        fields = np.empty((new_coords.shape[0], n_beta))
        for k in range(n_beta):
            cc = beta_cross_covariance(float(state.sigma2_beta[k]), state.phi_beta)
            fields[:, k] = krige_field(cc, obs, state.beta[:, [k]], np.zeros(1), new_coords, rng)[:, 0]
        out.append(fields)
    return np.array(out)
