"""Composition-sampled posterior predictions: profiles, grids and stage comparisons"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence
import numpy as np
import pandas as pd
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import ConvexHull, Delaunay
from backend.app.core.likelihood import sample_trunc
from backend.app.core.physics import (
    SiteCovariates, StageGeometry, design_basis, inverse_logit_density, mean_logit, site_geometry,
)
from backend.app.core.smoothing import CoreSplineBasis, orthogonalized_covariates, project_basis
from backend.app.core.spatial import cross_distances
from backend.app.core.state import ChainState
from backend.app.data.dataset import CoreDataset
from backend.app.exceptions import DegenerateCoreError, DomainError, SplineError
from backend.app.inference.kriging import krige_beta, krige_theta
from backend.app.models import Location, ModelOptions
from backend.app.sampler.archive import ChainArchive
from backend.app.utils.logger import logger

# Kriged draws outside the support are redrawn this many times before being dropped
MAX_REDRAWS = 20

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class ProfilePrediction:
    """Posterior draws of the mean profile and of new measurements at one location"""
    depths: np.ndarray
    mu: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray
    k: np.ndarray
    n_dropped: int = 0

    def to_frame(self, interval: float = 0.9) -> pd.DataFrame:
        lo, hi = 0.5 - interval / 2, 0.5 + interval / 2
        return pd.DataFrame({
            "depth": self.depths,
            "mu_median": np.median(self.mu, axis=0),
            "mu_lower": np.quantile(self.mu, lo, axis=0),
            "mu_upper": np.quantile(self.mu, hi, axis=0),
            "y_median": np.median(self.y, axis=0),
            "y_lower": np.quantile(self.y, lo, axis=0),
            "y_upper": np.quantile(self.y, hi, axis=0),
        })


def _expedition_for(archive: ChainArchive, name: Optional[str], rng: np.random.Generator) -> int:
    expeditions = archive.header.get("expeditions", [])
    if name is not None and name in expeditions:
        return expeditions.index(name)
    return int(rng.integers(len(expeditions)))


def new_site_tau(state: ChainState, options: ModelOptions, m: int, dx: float,
                 rng: np.random.Generator) -> float:
    """Scale of a measurement at a new core from the expedition's scale hierarchy"""
    log_tau2 = state.log_tau2_group[m] + state.eta_group[m] * np.log(dx)
    if options.hierarchical:
        log_tau2 += np.sqrt(state.sigma2_tau) * rng.standard_normal()
    return float(np.exp(0.5 * log_tau2))


def smoothing_term(options: ModelOptions, theta: np.ndarray, beta: np.ndarray, cov: SiteCovariates,
                   depths: np.ndarray, basis: Optional[CoreSplineBasis] = None,
                   core_depths: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Projected spline contribution at the requested depths
    With a core basis the projection is fixed by that core's measured depths;
    otherwise the requested depths define the projection.
    """
    spec = options.smoothing
    if spec is None or beta.size == 0:
        return np.zeros(depths.size)
    geom = site_geometry(theta, cov, options.constants)
    Z_new = design_basis(depths, geom, cov, options.constants)
    try:
        if basis is None:
            return project_basis(Z_new, CoreSplineBasis.build(depths, spec).H).h_perp @ beta
        projection = orthogonalized_covariates(core_depths, basis.H, theta, cov, options.constants)
        return projection.evaluate(basis.at(depths, spec), Z_new) @ beta
    except (DegenerateCoreError, SplineError):
        return np.zeros(depths.size)


def _profile(options: ModelOptions, theta: np.ndarray, term: np.ndarray, cov: SiteCovariates,
             depths: np.ndarray, geom: StageGeometry) -> np.ndarray:
    return np.atleast_1d(inverse_logit_density(
        mean_logit(depths, theta, cov, options.constants, term, geom), options.constants))


def predict_profile(archive: ChainArchive, location: Location, depths: Sequence[float],
                    rng: np.random.Generator, smoothing_at_new_sites: str = "project",
                    max_draws: Optional[int] = None) -> ProfilePrediction:
    """
    Per draw: krige theta and beta, rebuild the stage geometry and smoothing term,
    evaluate the mean profile and draw new measurements from the truncated error model
    """
    options = archive.options
    depths = np.asarray(depths, dtype=float)
    cov = SiteCovariates(temperature=location.temperature, smb=location.smb)
    coords = np.array([[location.lat, location.lon]])
    draws = np.arange(archive.n_draws)
    if max_draws is not None and max_draws < draws.size:
        draws = np.linspace(0, archive.n_draws - 1, max_draws).astype(int)

    mu_out, y_out, th_out, kap_out, k_out = [], [], [], [], []
    dropped = 0
    for d in draws:
        state = archive.state(d)
        for _ in range(MAX_REDRAWS):
            theta = krige_theta(archive, coords, rng, draws=[d])[0, 0]
            geom = site_geometry(theta, cov, options.constants)
            if geom.in_support:
                break
        else:
            dropped += 1
            continue
        beta = krige_beta(archive, coords, rng, draws=[d])[0, 0] if state.beta.size else np.empty(0)
        term = (smoothing_term(options, theta, beta, cov, depths)
                if smoothing_at_new_sites == "project" else np.zeros(depths.size))
        mu = _profile(options, theta, term, cov, depths, geom)
        m = _expedition_for(archive, location.expedition, rng)
        tau = new_site_tau(state, options, m, location.dx, rng)
        nu = state.nu if options.error_family == "t" else None
        y_out.append(sample_trunc(mu, np.full(mu.shape, tau), nu, rng))
        mu_out.append(mu)
        th_out.append(theta)
        kap_out.append(geom.kappa)
        k_out.append(geom.k)
    if dropped:
        logger.warning(f"Dropped {dropped} of {draws.size} draws whose kriged parameters left the support")
    if not mu_out:
        raise DomainError("every kriged draw left the model support", location=location.model_dump())
    return ProfilePrediction(depths, np.array(mu_out), np.array(y_out), np.array(th_out),
                             np.array(kap_out), np.array(k_out), dropped)


def predict_core_profile(archive: ChainArchive, dataset: CoreDataset, core_id: str,
                         depths: Optional[Sequence[float]] = None,
                         rng: Optional[np.random.Generator] = None,
                         smoothing: bool = True) -> ProfilePrediction:
    """Posterior profile at an observed core using its own site draws and projection"""
    options = archive.options
    rng = rng if rng is not None else np.random.default_rng(0)
    i = dataset.core_position(core_id)
    core = dataset.cores[i]
    site = int(dataset.site_index[i])
    depths = core.depths if depths is None else np.asarray(depths, dtype=float)
    basis = None
    if options.smoothing is not None:
        try:
            basis = CoreSplineBasis.build(core.depths, options.smoothing)
        except (DegenerateCoreError, SplineError):
            logger.warning(f"Core {core_id} has no usable smoothing basis; profile is unsmoothed")
    cov = core.covariates

    mu_out, y_out, th_out, kap_out, k_out = [], [], [], [], []
    for d in range(archive.n_draws):
        state = archive.state(d)
        theta = state.theta[site]
        geom = site_geometry(theta, cov, options.constants)
        beta = state.beta[site]
        term = (smoothing_term(options, theta, beta, cov, depths, basis, core.depths)
                if smoothing and basis is not None else np.zeros(depths.size))
        mu = _profile(options, theta, term, cov, depths, geom)
        if options.hierarchical:
            tau = float(np.exp(0.5 * state.log_tau2[i]))
        else:
            m = int(dataset.expedition_index[i])
            tau = float(np.exp(0.5 * (state.log_tau2_group[m] + state.eta_group[m] * np.log(core.dx))))
        nu = state.nu if options.error_family == "t" else None
        y_out.append(sample_trunc(mu, np.full(mu.shape, tau), nu, rng))
        mu_out.append(mu)
        th_out.append(theta)
        kap_out.append(geom.kappa)
        k_out.append(geom.k)
    return ProfilePrediction(depths, np.array(mu_out), np.array(y_out), np.array(th_out),
                             np.array(kap_out), np.array(k_out))


# ---------------------------------------------------------------------------
# Grids and maps
# ---------------------------------------------------------------------------

def _center(coords: np.ndarray):
    lat, lon = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    v = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]).mean(axis=0)
    return np.arcsin(v[2] / np.linalg.norm(v)), np.arctan2(v[1], v[0])


def gnomonic(coords: np.ndarray, center) -> np.ndarray:
    """Gnomonic projection (unit sphere) of lat/lon degrees about center (radians)"""
    lat0, lon0 = center
    lat, lon = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    cos_c = np.sin(lat0) * np.sin(lat) + np.cos(lat0) * np.cos(lat) * np.cos(lon - lon0)
    x = np.cos(lat) * np.sin(lon - lon0) / cos_c
    y = (np.cos(lat0) * np.sin(lat) - np.sin(lat0) * np.cos(lat) * np.cos(lon - lon0)) / cos_c
    return np.column_stack([x, y])


def inverse_gnomonic(xy: np.ndarray, center) -> np.ndarray:
    lat0, lon0 = center
    x, y = xy[:, 0], xy[:, 1]
    rho = np.hypot(x, y)
    c = np.arctan(rho)
    safe = np.where(rho > 0, rho, 1.0)
    lat = np.where(rho > 0, np.arcsin(np.cos(c) * np.sin(lat0) + y * np.sin(c) * np.cos(lat0) / safe), lat0)
    lon = lon0 + np.arctan2(x * np.sin(c), rho * np.cos(lat0) * np.cos(c) - y * np.sin(lat0) * np.sin(c))
    lon_deg = np.degrees(lon)
    return np.column_stack([np.degrees(lat), (lon_deg + 180.0) % 360.0 - 180.0])


def build_grid(site_coords: np.ndarray, n_points: int = 2500) -> np.ndarray:
    """Regular grid of about n_points locations inside the convex hull of the sites"""
    site_coords = np.atleast_2d(np.asarray(site_coords, dtype=float))
    if site_coords.shape[0] < 3:
        raise DomainError("a prediction grid needs at least three sites")
    center = _center(site_coords)
    xy = gnomonic(site_coords, center)
    hull = ConvexHull(xy)
    spacing = np.sqrt(hull.volume / n_points)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    gx = np.arange(lo[0] + spacing / 2, hi[0], spacing)
    gy = np.arange(lo[1] + spacing / 2, hi[1], spacing)
    pts = np.array(np.meshgrid(gx, gy)).reshape(2, -1).T
    inside = Delaunay(xy).find_simplex(pts) >= 0
    grid = inverse_gnomonic(pts[inside], center)
    logger.info(f"Prediction grid: {grid.shape[0]} points inside the site hull")
    return grid


def interpolate_covariates(dataset: CoreDataset, grid: np.ndarray) -> List[SiteCovariates]:
    """Linear interpolation of site temperature and SMB over the projected hull"""
    center = _center(dataset.site_coords)
    covs = dataset.site_covariates()
    values = np.array([[c.temperature, c.smb] for c in covs])
    interp = LinearNDInterpolator(gnomonic(dataset.site_coords, center), values)
    at_grid = interp(gnomonic(grid, center))
    # points on the hull boundary can fall outside by rounding
    nearest = np.argmin(cross_distances(grid, dataset.site_coords), axis=1)
    missing = np.isnan(at_grid).any(axis=1)
    at_grid[missing] = values[nearest[missing]]
    return [SiteCovariates(temperature=float(t), smb=float(s)) for t, s in at_grid]


def grid_draws(archive: ChainArchive, grid: np.ndarray, covariates: List[SiteCovariates],
               rng: np.random.Generator, max_draws: Optional[int] = None) -> Dict[str, np.ndarray]:
    """
    Kriged stage quantities at every grid point
    Returns arrays (draws, points) keyed by quantity; draws outside the support are NaN.
    """
    options = archive.options
    draws = np.arange(archive.n_draws)
    if max_draws is not None and max_draws < draws.size:
        draws = np.linspace(0, archive.n_draws - 1, max_draws).astype(int)
    theta = krige_theta(archive, grid, rng, draws=draws)
    names = ["surface_density", "k1", "k2", "k3", "k4", "kappa1", "kappa2", "kappa3"]
    out = {name: np.full((draws.size, grid.shape[0]), np.nan) for name in names}
    for d in range(draws.size):
        for g, cov in enumerate(covariates):
            geom = site_geometry(theta[d, g], cov, options.constants)
            if not geom.in_support:
                continue
            out["surface_density"][d, g] = inverse_logit_density(theta[d, g, 0], options.constants)
            for j in range(4):
                out[f"k{j + 1}"][d, g] = geom.k[j]
            for j in range(3):
                out[f"kappa{j + 1}"][d, g] = geom.kappa[j]
    return out


def map_table(grid: np.ndarray, quantities: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Long table (lon, lat, quantity, q05, q25, q50, q75, q95)"""
    frames = []
    for name, values in quantities.items():
        q = np.nanquantile(values, QUANTILES, axis=0)
        frame = pd.DataFrame({"lon": grid[:, 1], "lat": grid[:, 0], "quantity": name})
        for level, row in zip(QUANTILES, q):
            frame[f"q{int(round(level * 100)):02d}"] = row
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# Stage comparisons
# ---------------------------------------------------------------------------

def batch_means_se(indicator: np.ndarray) -> np.ndarray:
    """Monte Carlo SE of column means from non-overlapping batch means; NaN entries are skipped"""
    indicator = np.asarray(indicator, dtype=float)
    n = indicator.shape[0]
    n_batches = int(np.floor(np.sqrt(n)))
    if n_batches < 2:
        p = np.nanmean(indicator, axis=0) if n else np.zeros(indicator.shape[1:])
        return np.sqrt(p * (1 - p) / max(n, 1))
    size = n // n_batches
    batches = np.nanmean(indicator[: n_batches * size].reshape(n_batches, size, *indicator.shape[1:]), axis=1)
    return np.nanstd(batches, axis=0, ddof=1) / np.sqrt(np.sum(~np.isnan(batches), axis=0))


def stage_comparison(k: np.ndarray) -> pd.DataFrame:
    """
    Posterior probabilities that one stage rate exceeds another at each point
    Args:
        k: (draws, points, 4) Arrhenius rates; draws that are NaN at a point are ignored there
    """
    k = np.asarray(k, dtype=float)
    valid = ~np.isnan(k).any(axis=2)
    frame = pd.DataFrame(index=np.arange(k.shape[1]))
    for a, b in ((2, 3), (2, 4), (3, 4)):
        # strict inequality: ties count as false
        ind = np.where(valid, k[:, :, a - 1] > k[:, :, b - 1], np.nan)
        frame[f"p_k{a}_gt_k{b}"] = np.nanmean(ind, axis=0)
        frame[f"se_k{a}_gt_k{b}"] = batch_means_se(ind)
    return frame


def spatial_iqr(table: pd.DataFrame) -> pd.DataFrame:
    """Per quantity: spatial median of the posterior median and of the posterior IQR"""
    frame = table.assign(iqr=table["q75"] - table["q25"])
    return (frame.groupby("quantity", sort=False)
            .agg(median=("q50", "median"), median_iqr=("iqr", "median"))
            .reset_index())
