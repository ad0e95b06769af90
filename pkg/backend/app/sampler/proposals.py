"""Adaptive proposal state: running site covariances, step sizes and acceptance bookkeeping"""
from typing import Dict, Tuple
import numpy as np
from backend.app.core.physics import N_THETA
from backend.app.models import ChainConfig

# Haario scaling for a 12-dimensional block and its regularisation
HAARIO_SCALE = 2.38 ** 2 / N_THETA
HAARIO_EPS = 1e-8

# Proposal variance per coordinate until enough burn-in draws exist
FIXED_VARIANCE = 1e-4
MIN_COV_SAMPLES = 2 * N_THETA

# Blocks tuned against the multivariate acceptance band
MULTIVARIATE_BLOCKS = ("theta", "loadings", "nugget")

INITIAL_STEPS = {
    "beta": 0.1,
    "log_tau2": 0.3,
    "nu": 2.0,
    "phi": 0.2,
    "phi_beta": 0.2,
    "loadings": 0.02,
    "nugget": 0.05,
    "log_tau2_group": 0.2,
    "eta_group": 0.2,
}


class RunningCovariance:
    """Welford accumulator of per-site means and covariances"""

    def __init__(self, n_sites: int, dim: int = N_THETA):
        self.count = 0
        self.mean = np.zeros((n_sites, dim))
        self.m2 = np.zeros((n_sites, dim, dim))

    def update(self, values: np.ndarray) -> None:
        self.count += 1
        delta = values - self.mean
        self.mean += delta / self.count
        self.m2 += delta[:, :, None] * (values - self.mean)[:, None, :]

    def covariance(self, site: int) -> np.ndarray:
        if self.count < 2:
            return np.zeros(self.m2.shape[1:])
        c = self.m2[site] / (self.count - 1)
        return 0.5 * (c + c.T)


class ProposalState:
    """
    Everything the Metropolis blocks tune during burn-in
    Step sizes of scalar blocks are random-walk standard deviations (log scale for
    positive parameters); theta uses a scaled empirical covariance per site.
    """

    def __init__(self, block_shapes: Dict[str, Tuple[int, ...]], n_sites: int, config: ChainConfig):
        self.config = config
        self.running = RunningCovariance(n_sites)
        self.site_scale = np.ones(n_sites)
        self.steps: Dict[str, np.ndarray] = {
            name: np.full(shape, INITIAL_STEPS[name], dtype=float)
            for name, shape in block_shapes.items() if name != "theta"
        }
        shapes = dict(block_shapes, theta=(n_sites,))
        self.window = {name: np.zeros((2,) + tuple(shape)) for name, shape in shapes.items()}
        self.totals = {name: np.zeros((2,) + tuple(shape)) for name, shape in shapes.items()}

    # -- proposals ----------------------------------------------------------

    def site_proposal_cov(self, site: int) -> np.ndarray:
        """(2.38^2 / 12) (C_i + eps I) times the tuned site multiplier"""
        if self.running.count < MIN_COV_SAMPLES:
            base = FIXED_VARIANCE * np.eye(N_THETA)
        else:
            base = HAARIO_SCALE * (self.running.covariance(site) + HAARIO_EPS * np.eye(N_THETA))
        return self.site_scale[site] * base

    def step(self, block: str, index=()) -> float:
        return float(self.steps[block][index])

    # -- bookkeeping --------------------------------------------------------

    def record(self, block: str, index, accepted: bool) -> None:
        self.window[block][(1,) + np.index_exp[index]] += 1
        self.totals[block][(1,) + np.index_exp[index]] += 1
        if accepted:
            self.window[block][(0,) + np.index_exp[index]] += 1
            self.totals[block][(0,) + np.index_exp[index]] += 1

    def observe(self, theta: np.ndarray) -> None:
        self.running.update(theta)

    def adapt(self) -> None:
        """Scale every step by 0.8 or 1.2 when its window rate leaves the target band"""
        for block, counts in self.window.items():
            lo, hi = (self.config.multivariate_band if block in MULTIVARIATE_BLOCKS
                      else self.config.univariate_band)
            accepts, tries = counts[0], counts[1]
            rate = np.divide(accepts, tries, out=np.full(tries.shape, 0.5 * (lo + hi)), where=tries > 0)
            factor = np.where(rate < lo, 0.8, np.where(rate > hi, 1.2, 1.0))
            if block == "theta":
                self.site_scale *= factor
            else:
                self.steps[block] *= factor
            counts[:] = 0.0

    def acceptance_report(self) -> Dict[str, float]:
        """Overall acceptance rate per block"""
        report = {}
        for block, counts in self.totals.items():
            tries = counts[1].sum()
            if tries > 0:
                report[block] = float(counts[0].sum() / tries)
        return report

    # -- persistence --------------------------------------------------------

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {
            "running_count": np.array(self.running.count),
            "running_mean": self.running.mean,
            "running_m2": self.running.m2,
            "site_scale": self.site_scale,
        }
        for name, value in self.steps.items():
            out[f"step_{name}"] = value
        for name, value in self.window.items():
            out[f"window_{name}"] = value
        for name, value in self.totals.items():
            out[f"totals_{name}"] = value
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.running.count = int(arrays["running_count"])
        self.running.mean = np.array(arrays["running_mean"])
        self.running.m2 = np.array(arrays["running_m2"])
        self.site_scale = np.array(arrays["site_scale"])
        for name in self.steps:
            self.steps[name] = np.array(arrays[f"step_{name}"])
        for name in self.window:
            self.window[name] = np.array(arrays[f"window_{name}"])
            self.totals[name] = np.array(arrays[f"totals_{name}"])
