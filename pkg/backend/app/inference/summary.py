"""Posterior summary tables"""
from typing import Callable, Dict, List, Optional, Tuple
import numpy as np
import pandas as pd
from scipy.special import expit
from backend.app.core.physics import (
    HL_A, HL_E, HL_RHO_CRIT, RHO_BOUNDS, THETA_NAMES, herron_langway_profile, inverse_logit_density,
)
from backend.app.data.dataset import CoreDataset
from backend.app.inference.prediction import predict_core_profile
from backend.app.sampler.archive import ChainArchive


def _rho(j: int) -> Callable[[np.ndarray], np.ndarray]:
    lo, hi = RHO_BOUNDS[j]
    return lambda g: lo + (hi - lo) * expit(g)


def gamma_transforms(rho_ice: float) -> List[Tuple[str, int, Callable[[np.ndarray], np.ndarray], Optional[float]]]:
    """(name, gamma index, back-transform, earlier point estimate) per hierarchical mean"""
    return [
        ("surface_density", 0, lambda g: rho_ice * expit(g), None),
        ("A1", 1, np.exp, HL_A[0]),
        ("A2", 2, np.exp, HL_A[1]),
        ("E1", 3, np.exp, HL_E[0]),
        ("E2", 4, np.exp, HL_E[1]),
        ("rho1", 5, _rho(0), HL_RHO_CRIT),
        ("rho2", 6, _rho(1), 0.73),
        ("rho3", 7, _rho(2), 0.83),
    ]


def _row(name: str, values: np.ndarray, reference: Optional[float] = None) -> Dict[str, float]:
    values = np.asarray(values, dtype=float)
    return {
        "parameter": name,
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "sd": float(np.std(values)),
        "q05": float(np.quantile(values, 0.05)),
        "q95": float(np.quantile(values, 0.95)),
        "reference": np.nan if reference is None else float(reference),
        "reference_quantile": np.nan if reference is None else float(np.mean(values <= reference)),
    }


def summarize(archive: ChainArchive) -> pd.DataFrame:
    """
    Posterior summaries of the untransformed hierarchical means and scalar hyperparameters
    The reference_quantile column is the posterior probability at or below the
    earlier published point estimate, where one exists.
    """
    options = archive.options
    gamma = archive.draws["gamma"]
    rows = [_row(name, fn(gamma[:, j]), ref) for name, j, fn, ref in gamma_transforms(options.constants.rho_ice)]
    rows.append(_row("nu", archive.draws["nu"]))
    if options.hierarchical:
        rows.append(_row("sigma2_tau", archive.draws["sigma2_tau"]))
    phis = np.atleast_2d(archive.draws["phis"].reshape(archive.n_draws, -1))
    for j in range(phis.shape[1]):
        rows.append(_row(f"effective_range_km_{j + 1}", 3.0 / phis[:, j]))
    if archive.draws["beta"].size:
        rows.append(_row("beta_effective_range_km", 3.0 / archive.draws["phi_beta"]))
    return pd.DataFrame(rows)


def site_medians(archive: ChainArchive) -> pd.DataFrame:
    """Posterior median of every site parameter; medians because untransformed values are heavy tailed"""
    theta = np.median(archive.draws["theta"], axis=0)
    frame = pd.DataFrame(theta, columns=list(THETA_NAMES))
    coords = archive.site_coords
    frame.insert(0, "lon", coords[:, 1])
    frame.insert(0, "lat", coords[:, 0])
    return frame


def parameter_correlations(archive: ChainArchive) -> pd.DataFrame:
    """Posterior mean of the between-parameter correlation matrix implied by the cross-covariance"""
    kind = archive.options.cross_covariance.kind
    total = np.zeros((len(THETA_NAMES), len(THETA_NAMES)))
    for d in range(archive.n_draws):
        marginal = archive.state(d).cross_covariance(kind).marginal()
        sd = np.sqrt(np.diag(marginal))
        total += marginal / np.outer(sd, sd)
    return pd.DataFrame(total / archive.n_draws, index=list(THETA_NAMES), columns=list(THETA_NAMES))


def profile_comparison(archive: ChainArchive, dataset: CoreDataset, core_id: str,
                       depths: Optional[np.ndarray] = None,
                       rng: Optional[np.random.Generator] = None) -> pd.DataFrame:
    """
    Aligned posterior-median profiles for one core: the original two-stage curve,
    the spatial model without and with its smoothing term, and the measurements
    """
    options = archive.options
    core = dataset.cores[dataset.core_position(core_id)]
    x = core.depths if depths is None else np.asarray(depths, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    plain = predict_core_profile(archive, dataset, core_id, x, rng, smoothing=False)
    smooth = predict_core_profile(archive, dataset, core_id, x, rng, smoothing=True)
    surface = inverse_logit_density(np.median(plain.theta[:, 0]), options.constants)

    frame = pd.DataFrame({
        "depth": x,
        "hl": herron_langway_profile(x, surface, core.covariates, options.constants),
        "svsd": np.median(plain.mu, axis=0),
        "smoothed_svsd": np.median(smooth.mu, axis=0),
    })
    if depths is None:
        frame["observed"] = core.density
    return frame
