"""Distances, exponential correlations, multivariate cross-covariances and semivariograms

Multivariate fields over n sites are vectorised parameter-major: entry
p * n + i holds parameter p at site i, so the separable covariance is V kron R.
"""
from dataclasses import dataclass
from typing import Optional, Union
import numpy as np
import pandas as pd
import scipy.linalg as spl
from scipy.optimize import least_squares
from backend.app.exceptions import FactorizationError, SemivariogramFitError
from backend.app.utils.logger import logger

EARTH_RADIUS_KM = 6371.0

# Sites closer than this are treated as the same location
COINCIDENT_KM = 1e-9

# Relative diagonal jitter tried in turn before giving up
JITTER_SCHEDULE = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


# ---------------------------------------------------------------------------
# Distances and correlations
# ---------------------------------------------------------------------------

def great_circle(a: np.ndarray, b: np.ndarray) -> Union[float, np.ndarray]:
    """Haversine distance (km) between (lat, lon) points given in degrees"""
    a = np.radians(np.asarray(a, dtype=float))
    b = np.radians(np.asarray(b, dtype=float))
    dlat = b[..., 0] - a[..., 0]
    dlon = b[..., 1] - a[..., 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[..., 0]) * np.cos(b[..., 0]) * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


def cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of great-circle distances between two coordinate sets"""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return great_circle(a[:, None, :], b[None, :, :])


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    """Symmetric pairwise distances with an exact zero diagonal"""
    d = cross_distances(coords, coords)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class SiteSet:
    """Unique site coordinates (lat, lon degrees) with their distance matrix (km)"""
    coords: np.ndarray
    distances: np.ndarray

    @classmethod
    def from_coords(cls, coords: np.ndarray) -> "SiteSet":
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        return cls(coords=coords, distances=distance_matrix(coords))

    @property
    def n(self) -> int:
        return self.coords.shape[0]


def exp_correlation(dist: np.ndarray, phi: float) -> np.ndarray:
    """exp(-phi d)"""
    return np.exp(-phi * np.asarray(dist, dtype=float))


# ---------------------------------------------------------------------------
# Factorizations
# ---------------------------------------------------------------------------

class GaussianFactor:
    """Cholesky factor of a dense covariance with solve, log-determinant and sampling"""

    def __init__(self, chol: np.ndarray, jitter: float = 0.0):
        self.chol = chol
        self.jitter = jitter
        self.dim = chol.shape[0]
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return spl.cho_solve((self.chol, True), b)

    def quad(self, r: np.ndarray) -> float:
        w = spl.solve_triangular(self.chol, r, lower=True)
        return float(w @ w)

    def logpdf(self, r: np.ndarray) -> float:
        """Zero-mean Gaussian log-density of residual r"""
        return -0.5 * (self.dim * np.log(2 * np.pi) + self.logdet + self.quad(r))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.chol @ rng.standard_normal(self.dim)

    def dense(self) -> np.ndarray:
        return self.chol @ self.chol.T


def jittered_cholesky(matrix: np.ndarray) -> GaussianFactor:
    """
    Lower Cholesky factor, adding escalating diagonal jitter if needed
    Raises:
        FactorizationError with size, final jitter and minimum eigenvalue
    """
    matrix = np.asarray(matrix, dtype=float)
    scale = float(np.mean(np.diag(matrix))) if matrix.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(matrix.shape[0])
    for rel in JITTER_SCHEDULE:
        try:
            chol = spl.cholesky(matrix + rel * scale * eye, lower=True)
            if rel > 0:
                logger.debug(f"Cholesky needed relative jitter {rel:g}")
            return GaussianFactor(chol, jitter=rel * scale)
        except np.linalg.LinAlgError:
            continue
    min_eig = float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T)).min())
    raise FactorizationError(
        f"matrix of size {matrix.shape[0]} not positive definite after jitter {JITTER_SCHEDULE[-1]:g}",
        size=matrix.shape[0], jitter=JITTER_SCHEDULE[-1] * scale, min_eigenvalue=min_eig,
    )


class KroneckerFactor:
    """Factor of V kron R (parameter-major) through the factors of V and R"""

    def __init__(self, v_factor: GaussianFactor, r_factor: GaussianFactor):
        self.v = v_factor
        self.r = r_factor
        self.p = v_factor.dim
        self.n = r_factor.dim
        self.dim = self.p * self.n
        self.logdet = self.n * v_factor.logdet + self.p * r_factor.logdet

    def solve(self, b: np.ndarray) -> np.ndarray:
        """(V kron R)^-1 b for a vector or a matrix of columns"""
        b = np.asarray(b, dtype=float)
        k = 1 if b.ndim == 1 else b.shape[1]
        X = self.v.solve(b.reshape(self.p, self.n * k)).reshape(self.p, self.n, k)
        X = X.transpose(1, 0, 2).reshape(self.n, self.p * k)
        X = self.r.solve(X).reshape(self.n, self.p, k).transpose(1, 0, 2)
        return X.reshape(b.shape)

    def quad(self, r: np.ndarray) -> float:
        return float(np.asarray(r) @ self.solve(r))

    def logpdf(self, r: np.ndarray) -> float:
        return -0.5 * (self.dim * np.log(2 * np.pi) + self.logdet + self.quad(r))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        Z = rng.standard_normal((self.p, self.n))
        return (self.v.chol @ Z @ self.r.chol.T).ravel()

    def dense(self) -> np.ndarray:
        return np.kron(self.v.dense(), self.r.dense())


CovarianceFactor = Union[GaussianFactor, KroneckerFactor]


# ---------------------------------------------------------------------------
# Cross-covariance family
# ---------------------------------------------------------------------------

@dataclass
class CrossCovariance:
    """
    Sigma = (Lambda kron I) BlockDiag(R_1..R_r) (Lambda^T kron I)
          = sum_j (lambda_j lambda_j^T) kron R_j
    For the separable kind r = 1 in the correlation sense and Lambda is the
    Cholesky factor of V, giving V kron R.
    The latent-factor kind adds diag(nugget) kron I so that fewer than twelve
    factors still give a nonsingular covariance.
    """
    kind: str
    loadings: np.ndarray
    phis: np.ndarray
    nugget: Optional[np.ndarray] = None

    @property
    def n_components(self) -> int:
        return 1 if self.kind == "separable" else self.loadings.shape[1]

    @property
    def V(self) -> np.ndarray:
        """Between-parameter covariance Lambda Lambda^T"""
        return self.loadings @ self.loadings.T

    def _terms(self):
        if self.kind == "separable":
            yield self.V, float(self.phis[0])
        else:
            for j in range(self.loadings.shape[1]):
                lam = self.loadings[:, j]
                yield np.outer(lam, lam), float(self.phis[j])

    def covariance(self, dist: np.ndarray) -> np.ndarray:
        """Parameter-major covariance between two site sets separated by dist"""
        p = self.loadings.shape[0]
        m, n = dist.shape
        out = np.zeros((p * m, p * n))
        for B, phi in self._terms():
            out += np.kron(B, exp_correlation(dist, phi))
        if self.nugget is not None:
            out += np.kron(np.diag(self.nugget), (dist <= COINCIDENT_KM).astype(float))
        return out

    def factor(self, dist: np.ndarray) -> CovarianceFactor:
        """Factorization of the square covariance; Kronecker path for the separable kind"""
        if self.kind == "separable":
            return KroneckerFactor(jittered_cholesky(self.V), jittered_cholesky(exp_correlation(dist, self.phis[0])))
        return jittered_cholesky(self.covariance(dist))

    def marginal(self) -> np.ndarray:
        """12 x 12 covariance of theta at a single site"""
        marginal = sum(B for B, _ in self._terms())
        if self.nugget is not None:
            marginal = marginal + np.diag(self.nugget)
        return marginal


def build_cross_covariance(spec: CrossCovariance, sites: SiteSet) -> np.ndarray:
    """Dense 12 n_s x 12 n_s covariance of theta(S)"""
    sigma = spec.covariance(sites.distances)
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# Semivariogram diagnostics
# ---------------------------------------------------------------------------

@dataclass
class SemivariogramFit:
    """Binned empirical semivariogram and fitted exponential model"""
    bin_centers: np.ndarray
    semivariance: np.ndarray
    n_pairs: np.ndarray
    nugget: float
    partial_sill: float
    range_km: float

    def model(self, h: np.ndarray) -> np.ndarray:
        return exponential_semivariogram(np.asarray(h, dtype=float), self.nugget, self.partial_sill, self.range_km)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_center_km": self.bin_centers,
            "semivariance": self.semivariance,
            "n_pairs": self.n_pairs,
            "fitted": self.model(self.bin_centers),
        })


def exponential_semivariogram(h: np.ndarray, nugget: float, psill: float, range_km: float) -> np.ndarray:
    return nugget + psill * (1.0 - np.exp(-h / range_km))


def empirical_semivariogram(values: np.ndarray, dist: np.ndarray, n_bins: int,
                            max_lag: Optional[float] = None):
    """Mean of (v_i - v_j)^2 / 2 over site pairs in equal-width distance bins"""
    values = np.asarray(values, dtype=float)
    iu = np.triu_indices(values.size, k=1)
    lags = dist[iu]
    half_sq = 0.5 * (values[iu[0]] - values[iu[1]]) ** 2
    if max_lag is None:
        max_lag = 0.5 * lags.max()
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    which = np.digitize(lags, edges) - 1
    # the last bin is closed on the right
    which[lags == edges[-1]] = n_bins - 1
    centers, gammas, counts = [], [], []
    for b in range(n_bins):
        sel = which == b
        # bins with fewer than two pairs carry no usable information
        if sel.sum() < 2:
            continue
        centers.append(lags[sel].mean())
        gammas.append(half_sq[sel].mean())
        counts.append(int(sel.sum()))
    return np.array(centers), np.array(gammas), np.array(counts)


def fit_semivariogram(values: np.ndarray, sites: SiteSet, n_bins: int = 12,
                      max_lag: Optional[float] = None) -> SemivariogramFit:
    """
    Weighted least-squares fit of nugget + psill (1 - exp(-h / range))
    Bins are weighted by the square root of their pair counts.
    """
    centers, gammas, counts = empirical_semivariogram(values, sites.distances, n_bins, max_lag)
    if centers.size < 3:
        raise SemivariogramFitError(f"only {centers.size} usable distance bins")

    weights = np.sqrt(counts)
    span = float(centers.max())
    if span <= 0.0:
        raise SemivariogramFitError("every usable site pair is at zero lag")

    def residuals(params: np.ndarray) -> np.ndarray:
        nugget, psill, rng = params
        return weights * (exponential_semivariogram(centers, nugget, psill, rng) - gammas)

    x0 = np.array([max(float(gammas.min()), 0.0),
                   max(float(gammas.max() - gammas.min()), 0.0),
                   0.25 * span])
    bounds = ([0.0, 0.0, 1e-6 * span], [np.inf, np.inf, 10.0 * span])
    res = least_squares(residuals, x0, bounds=bounds, method="trf")
    if not res.success:
        raise SemivariogramFitError(f"semivariogram fit failed: {res.message}")

    nugget, psill, rng = res.x
    logger.info(f"Semivariogram fit: nugget={nugget:.4g}, psill={psill:.4g}, range={rng:.4g} km")
    return SemivariogramFit(centers, gammas, counts, float(nugget), float(psill), float(rng))


def mgp_logpdf(theta: np.ndarray, mean: np.ndarray, factor: CovarianceFactor) -> float:
    """Log-density of a parameter-major field under N(mean, Sigma)"""
    return factor.logpdf(np.asarray(theta, dtype=float).ravel() - np.asarray(mean, dtype=float).ravel())
