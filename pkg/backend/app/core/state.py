"""Parameter state of the Markov chain"""
from dataclasses import dataclass, fields
from typing import Dict, Optional
import numpy as np
from backend.app.core.physics import N_THETA
from backend.app.core.spatial import CrossCovariance


def loadings_from_params(params: np.ndarray, kind: str) -> np.ndarray:
    """
    Loading matrix Lambda from its unconstrained parameters
    Lower-trapezoidal with exponentiated diagonal; independent keeps only the diagonal.
    """
    L = np.tril(params)
    diag = np.arange(min(L.shape))
    L[diag, diag] = np.exp(params[diag, diag])
    if kind == "independent":
        L = np.diag(np.diag(L))
    return L


def free_loading_mask(kind: str, n_components: int) -> np.ndarray:
    """Boolean mask of the free entries of the loading parameter matrix"""
    mask = np.tril(np.ones((N_THETA, n_components), dtype=bool))
    if kind == "independent":
        mask = np.eye(N_THETA, dtype=bool)
    return mask


@dataclass
class ChainState:
    """
    Current values of every sampled quantity
    Site fields are (n_sites, ...) arrays; scale parameters are stored on the log scale.
    """
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    phis: np.ndarray
    phi_beta: float
    sigma2_beta: np.ndarray
    nu: float
    log_tau2: np.ndarray
    log_tau2_group: np.ndarray
    eta_group: np.ndarray
    sigma2_tau: float
    V: Optional[np.ndarray] = None
    loading_params: Optional[np.ndarray] = None
    log_nugget: Optional[np.ndarray] = None

    def copy(self) -> "ChainState":
        values = {}
        for f in fields(self):
            v = getattr(self, f.name)
            values[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return ChainState(**values)

    @property
    def n_sites(self) -> int:
        return self.theta.shape[0]

    def loadings(self, kind: str) -> np.ndarray:
        if kind == "separable":
            return np.linalg.cholesky(self.V)
        return loadings_from_params(self.loading_params, kind)

    def cross_covariance(self, kind: str) -> CrossCovariance:
        nugget = None if self.log_nugget is None else np.exp(2.0 * self.log_nugget)
        return CrossCovariance(kind=kind, loadings=self.loadings(kind), phis=np.asarray(self.phis, dtype=float),
                               nugget=nugget)

    def theta_vector(self) -> np.ndarray:
        """theta(S) in parameter-major order"""
        return self.theta.T.ravel()

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Named arrays for archiving; optional members are skipped when unset"""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = np.array(v, dtype=float)
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ChainState":
        values = {}
        for f in fields(cls):
            if f.name not in arrays:
                values[f.name] = None
                continue
            v = np.array(arrays[f.name], dtype=float)
            values[f.name] = float(v) if v.ndim == 0 else v
        return cls(**values)
