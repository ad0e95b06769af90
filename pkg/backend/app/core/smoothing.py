"""Spline smoothing basis and per-core projection into the null space of the design"""
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import numpy as np
import scipy.linalg as spl
from backend.app.core.physics import (
    DEFAULT_CONSTANTS, N_STAGES, SiteCovariates, design_basis, site_geometry,
)
from backend.app.exceptions import DegenerateCoreError, SplineError
from backend.app.models import PhysicalConstants, SplineSpec

# Columns of Z with norm below this are treated as identically zero
ZERO_COLUMN_TOL = 1e-12


def place_knots(depths: np.ndarray, spec: SplineSpec) -> np.ndarray:
    """Interior knots for a core: equally spaced quantiles (or positions) of its depths"""
    depths = np.asarray(depths, dtype=float)
    if spec.n_knots == 0:
        return np.empty(0)
    probs = np.arange(1, spec.n_knots + 1) / (spec.n_knots + 1)
    if spec.knot_rule == "quantile":
        knots = np.quantile(depths, probs)
    else:
        knots = depths.min() + probs * (depths.max() - depths.min())
    if np.any(np.diff(knots) <= 0):
        raise SplineError(f"knots collapse for depths in [{depths.min()}, {depths.max()}]")
    return knots


def spline_basis(x: np.ndarray, spec: SplineSpec, knots: np.ndarray,
                 scale: float = 1.0) -> np.ndarray:
    """
    Truncated-power spline basis without the constant column
    Args:
        x: depths (m)
        spec: degree and knot count
        knots: strictly increasing interior knots (m)
        scale: depths are divided by this before evaluation (conditioning only)
    Returns:
        array (len(x), degree + n_knots)
    """
    knots = np.asarray(knots, dtype=float)
    if knots.size != spec.n_knots:
        raise SplineError(f"expected {spec.n_knots} knots, got {knots.size}")
    if np.any(np.diff(knots) <= 0):
        raise SplineError("knots must be strictly increasing")

    u = np.atleast_1d(np.asarray(x, dtype=float)) / scale
    uk = knots / scale
    cols = [u ** p for p in range(1, spec.degree + 1)]
    cols += [np.maximum(u - kn, 0.0) ** spec.degree for kn in uk]
    return np.column_stack(cols) if cols else np.empty((u.size, 0))


def _check_depths(Z: np.ndarray) -> None:
    if Z.shape[0] < Z.shape[1]:
        raise DegenerateCoreError(
            f"core has {Z.shape[0]} depths but the design has {Z.shape[1]} columns",
            n_depths=Z.shape[0],
        )


def _kept_columns(Z: np.ndarray) -> np.ndarray:
    """Indices of the columns of Z that are not identically zero"""
    norms = np.linalg.norm(Z, axis=0)
    return np.flatnonzero(norms > ZERO_COLUMN_TOL * max(1.0, norms.max(initial=0.0)))


def _range_basis(Zk: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(Zk)"""
    if Zk.shape[1] == 0:
        return np.empty((Zk.shape[0], 0))
    return spl.orth(Zk)


def null_space_projector(Z: np.ndarray) -> np.ndarray:
    """P = I - Z (Z^T Z)^+ Z^T, rank aware"""
    Z = np.asarray(Z, dtype=float)
    _check_depths(Z)
    Q = _range_basis(Z[:, _kept_columns(Z)])
    return np.eye(Z.shape[0]) - Q @ Q.T


@dataclass
class OrthogonalBasis:
    """Projected spline covariates of one core for one parameter value"""
    h_perp: np.ndarray
    range_basis: np.ndarray
    coefficients: np.ndarray
    kept_columns: np.ndarray

    @property
    def projector(self) -> np.ndarray:
        n = self.range_basis.shape[0]
        return np.eye(n) - self.range_basis @ self.range_basis.T

    def evaluate(self, H_new: np.ndarray, Z_new: np.ndarray) -> np.ndarray:
        """h_perp at arbitrary depths: h(x) - z(x)^T C (equals P H at the measured depths)"""
        return H_new - Z_new[:, self.kept_columns] @ self.coefficients


def project_basis(Z: np.ndarray, H: np.ndarray) -> OrthogonalBasis:
    """Project spline columns H onto the orthogonal complement of span(Z)"""
    Z = np.asarray(Z, dtype=float)
    _check_depths(Z)
    kept = _kept_columns(Z)
    Zk = Z[:, kept]
    Q = _range_basis(Zk)
    # least-squares coefficients of H on the kept design columns
    coef = np.linalg.lstsq(Zk, H, rcond=None)[0] if kept.size else np.empty((0, H.shape[1]))
    h_perp = H - Q @ (Q.T @ H)
    return OrthogonalBasis(h_perp=h_perp, range_basis=Q, coefficients=coef, kept_columns=kept)


def orthogonalized_covariates(depths: np.ndarray, H: np.ndarray, theta: np.ndarray,
                              cov: SiteCovariates,
                              consts: PhysicalConstants = DEFAULT_CONSTANTS) -> OrthogonalBasis:
    """H_perp = P(theta) H for one core at its measured depths"""
    geom = site_geometry(theta, cov, consts)
    Z = design_basis(depths, geom, cov, consts)
    return project_basis(Z, H)


@dataclass
class CoreSplineBasis:
    """Spline basis of one core, fixed for the whole run"""
    knots: np.ndarray
    scale: float
    H: np.ndarray

    @classmethod
    def build(cls, depths: np.ndarray, spec: SplineSpec) -> "CoreSplineBasis":
        depths = np.asarray(depths, dtype=float)
        if depths.size < N_STAGES:
            raise DegenerateCoreError(f"core has only {depths.size} depths", n_depths=depths.size)
        knots = place_knots(depths, spec)
        scale = float(depths.max()) if depths.max() > 0 else 1.0
        return cls(knots=knots, scale=scale, H=spline_basis(depths, spec, knots, scale))

    def at(self, x: np.ndarray, spec: SplineSpec) -> np.ndarray:
        return spline_basis(x, spec, self.knots, self.scale)


@dataclass
class ProjectionCache:
    """Last projected basis per core, invalidated when the site parameters change"""
    entries: Dict[int, Tuple[bytes, OrthogonalBasis]] = field(default_factory=dict)
    # shared by the likelihood worker threads
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def get(self, core: int, theta: np.ndarray) -> Optional[OrthogonalBasis]:
        with self.lock:
            hit = self.entries.get(core)
        if hit is not None and hit[0] == theta.tobytes():
            return hit[1]
        return None

    def put(self, core: int, theta: np.ndarray, basis: OrthogonalBasis) -> None:
        with self.lock:
            self.entries[core] = (theta.tobytes(), basis)

    def clear(self) -> None:
        with self.lock:
            self.entries.clear()
