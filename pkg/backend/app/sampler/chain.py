"""Adaptive Metropolis-within-Gibbs driver"""
import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import numpy as np
from backend.app.core.likelihood import SnowDensityModel, hierarchical_mean_map
from backend.app.core.physics import N_THETA, THETA_NAMES
from backend.app.core.state import ChainState
from backend.app.exceptions import SamplerError, SnowDensityError
from backend.app.models import ChainConfig
from backend.app.sampler import gibbs, metropolis
from backend.app.sampler.archive import ChainArchive
from backend.app.sampler.proposals import ProposalState
from backend.app.sampler.workspace import Workspace
from backend.app.utils.logger import logger

# One independent random stream per block
STREAMS = ("theta", "beta", "tau2", "gibbs", "covariance", "nu", "debug")

INITIAL_V_SCALE = 0.01
INITIAL_NU = 10.0
LOCALITY_STEP = 1e-3


def make_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Counter-based Philox generators spawned from one seed"""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(STREAMS, children)}


def _inverse_gamma_mean(prior) -> float:
    return prior.scale / (prior.shape - 1.0) if prior.shape > 1 else prior.scale


def initial_state(model: SnowDensityModel) -> ChainState:
    """
    Start at the prior means: theta(s) = M gamma_0 at every site, beta = 0,
    tau2_i = exp(prior mean of log tau2_m)
    """
    p = model.priors
    gamma = np.array([g.mean for g in p.gamma_priors()])
    n_sites, n_cores = model.sites.n, model.dataset.n_cores
    phi0 = 1.0 / np.sqrt(p.phi_inv_bounds[0] * p.phi_inv_bounds[1])
    phi_beta0 = 1.0 / np.sqrt(p.phi_beta_inv_bounds[0] * p.phi_beta_inv_bounds[1])

    V, loading_params, log_nugget = None, None, None
    if model.kind == "separable":
        V = INITIAL_V_SCALE * np.eye(N_THETA)
    else:
        loading_params = np.zeros((N_THETA, model.n_components))
        diag = np.arange(model.n_components)
        loading_params[diag, diag] = 0.5 * np.log(INITIAL_V_SCALE)
        if model.kind == "latent_factor":
            log_nugget = np.full(N_THETA, p.log_nugget_sd.mean)

    return ChainState(
        theta=np.tile(hierarchical_mean_map(gamma), (n_sites, 1)),
        beta=np.zeros((n_sites, model.n_beta)),
        gamma=gamma,
        phis=np.full(model.n_components, phi0),
        phi_beta=float(phi_beta0),
        sigma2_beta=np.full(model.n_beta, _inverse_gamma_mean(p.sigma2_beta)),
        nu=INITIAL_NU,
        log_tau2=np.full(n_cores, p.log_tau2_group.mean),
        log_tau2_group=np.full(model.n_expeditions, p.log_tau2_group.mean),
        eta_group=np.zeros(model.n_expeditions),
        sigma2_tau=_inverse_gamma_mean(p.sigma2_tau),
        V=V,
        loading_params=loading_params,
        log_nugget=log_nugget,
    )


def block_shapes(model: SnowDensityModel) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {"theta": (model.sites.n,), "phi": (model.n_components,)}
    if model.n_beta:
        shapes["beta"] = (model.sites.n, model.n_beta)
        shapes["phi_beta"] = (1,)
    if model.options.hierarchical:
        shapes["log_tau2"] = (model.dataset.n_cores,)
    else:
        shapes["log_tau2_group"] = (model.n_expeditions,)
        shapes["eta_group"] = (model.n_expeditions,)
    if model.options.error_family == "t":
        shapes["nu"] = (1,)
    if model.kind != "separable":
        shapes["loadings"] = (1,)
    if model.kind == "latent_factor":
        shapes["nugget"] = (1,)
    return shapes


def _jsonable(value: Any) -> Any:
    """RNG states hold numpy arrays; tag them so they can be restored"""
    if isinstance(value, np.ndarray):
        return {"__array__": [int(v) for v in value.ravel()], "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict) and "__array__" in value:
        return np.array(value["__array__"], dtype=value["dtype"])
    if isinstance(value, dict):
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


class MetropolisWithinGibbs:
    """
    One Markov chain over the full parameter state

    Sweep order: theta sites (repeated), beta fields, tau2, the Gibbs block
    (gamma, scale hierarchy, sigma2_beta, V), then phi / loadings, phi_beta and nu.
    Adaptation runs only during burn-in.
    """

    def __init__(self, model: SnowDensityModel, config: ChainConfig,
                 run_id: str = "", header: Optional[Dict[str, Any]] = None):
        self.model = model
        self.config = config
        self.run_id = run_id
        self.header = dict(header or {})
        self.state = initial_state(model)
        self.streams = make_streams(config.seed)
        self.proposals = ProposalState(block_shapes(model), model.sites.n, config)
        self.iteration = 0
        self._kept: Dict[str, List[np.ndarray]] = {}
        self._kept_loglik: List[np.ndarray] = []
        self._started = time.time()

        self.ws = Workspace(model, self.state)
        if any(mu is None for mu in self.ws.means):
            raise SamplerError("initial state is outside the model support", 0, "init")

    # -- sweeps -------------------------------------------------------------

    def _block(self, name: str, fn, *args) -> None:
        try:
            fn(self.model, self.state, *args)
        except SamplerError:
            raise
        except (SnowDensityError, ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
            raise SamplerError(str(e), self.iteration, name) from e

    def sweep(self) -> None:
        m, ws, prop, rng = self.model, self.ws, self.proposals, self.streams
        # site updates maintain the residual incrementally; rebuild it so a resumed chain
        # starts each sweep from the same values
        ws.refresh_theta_residual(self.state)
        for _ in range(self.config.theta_repeats):
            for site in range(m.sites.n):
                self._block("theta", metropolis.step_site_theta, ws, prop, site, rng["theta"])
        if m.n_beta:
            self._block("beta", metropolis.step_beta, ws, prop, rng["beta"])
        if m.options.hierarchical:
            self._block("tau2", metropolis.step_log_tau2, ws, prop, rng["tau2"])
        else:
            self._block("tau2", metropolis.step_scale_groups, ws, prop, rng["tau2"])

        self._block("gamma", gibbs.gibbs_gamma, ws, rng["gibbs"])
        if m.options.hierarchical:
            self._block("scale_hierarchy", gibbs.gibbs_scale_hierarchy, rng["gibbs"])
        if m.n_beta:
            self._block("sigma2_beta", gibbs.gibbs_sigma2_beta, ws, rng["gibbs"])
        if m.kind == "separable":
            self._block("V", gibbs.gibbs_V, ws, rng["gibbs"])
        else:
            self._block("loadings", metropolis.step_loadings, ws, prop, rng["covariance"])
            if m.kind == "latent_factor":
                self._block("nugget", metropolis.step_nugget, ws, prop, rng["covariance"])

        self._block("phi", metropolis.step_phi, ws, prop, rng["covariance"])
        if m.n_beta:
            self._block("phi_beta", metropolis.step_phi_beta, ws, prop, rng["covariance"])
        if m.options.error_family == "t":
            self._block("nu", metropolis.step_nu, ws, prop, rng["nu"])

    def _after_sweep(self, t: int) -> None:
        cfg = self.config
        if t < cfg.n_burn:
            self.proposals.observe(self.state.theta)
            if (t + 1) % cfg.adapt_window == 0:
                self.proposals.adapt()
            if t == cfg.n_burn - 1:
                logger.info("Burn-in finished; proposals frozen",
                            extra={"run_id": self.run_id, "iteration": t, "block": "adapt"})
        elif (t - cfg.n_burn) % cfg.thin == 0:
            self._keep(t)

        if cfg.debug_check_every and (t + 1) % cfg.debug_check_every == 0:
            self.locality_check(t)
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            rates = {k: round(v, 3) for k, v in self.proposals.acceptance_report().items()}
            logger.info(f"Iteration {t + 1}/{cfg.n_iter}, {time.time() - self._started:.1f}s, acceptance {rates}",
                        extra={"run_id": self.run_id, "iteration": t + 1, "block": "chain"})

    def _keep(self, t: int) -> None:
        ll = self.ws.pointwise_loglik(self.state)
        if not np.all(np.isfinite(ll)):
            raise SamplerError("non-finite log-likelihood in archived draw", t, "archive")
        for name, value in self.state.to_arrays().items():
            self._kept.setdefault(name, []).append(value)
        self._kept_loglik.append(ll)

    def locality_check(self, t: int) -> None:
        """Compare a local theta-site ratio with the full log-posterior difference"""
        rng = self.streams["debug"]
        site = int(rng.integers(self.model.sites.n))
        proposal = self.state.theta[site] + LOCALITY_STEP * rng.standard_normal(N_THETA)
        local, _ = metropolis.site_theta_log_ratio(self.model, self.ws, self.state, site, proposal)
        moved = self.state.copy()
        moved.theta[site] = proposal
        lp_old = self.model.log_posterior(self.state)
        full = self.model.log_posterior(moved) - lp_old
        if not np.isfinite(local) and not np.isfinite(full):
            return
        if not abs(local - full) <= 1e-8 * max(1.0, abs(lp_old)):
            raise SamplerError(f"local ratio {local:.12g} differs from full difference {full:.12g}",
                               t, "debug", site=site)
        logger.debug("Locality check passed", extra={"run_id": self.run_id, "iteration": t, "block": "debug"})

    # -- driver -------------------------------------------------------------

    def run(self, checkpoint_path: Optional[Union[str, Path]] = None) -> ChainArchive:
        cfg = self.config
        logger.info(f"Starting chain: {cfg.n_iter} iterations, burn-in {cfg.n_burn}, thin {cfg.thin}",
                    extra={"run_id": self.run_id, "block": "chain"})
        while self.iteration < cfg.n_iter:
            t = self.iteration
            self.sweep()
            self._after_sweep(t)
            self.iteration += 1
            if checkpoint_path and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                self.save_checkpoint(checkpoint_path)
        return self.archive()

    def archive(self) -> ChainArchive:
        draws = {name: np.stack(values) for name, values in self._kept.items()}
        loglik = np.stack(self._kept_loglik) if self._kept_loglik else np.empty((0, self.model.dataset.n_obs))
        header = dict(self.header)
        header.update({
            "model": self.model.options.model_dump(mode="json"),
            "priors": self.model.priors.model_dump(mode="json"),
            "chain": self.config.model_dump(mode="json"),
            "theta_names": list(THETA_NAMES),
            "site_coords": self.model.sites.coords.tolist(),
            "core_ids": [c.core_id for c in self.model.dataset.cores],
            "expeditions": list(self.model.dataset.expeditions),
        })
        return ChainArchive(draws=draws, loglik=loglik,
                            acceptance=self.proposals.acceptance_report(), header=header)

    # -- checkpoints --------------------------------------------------------

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        """Full state, proposal state, RNG states and the draws kept so far"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"state__{k}": v for k, v in self.state.to_arrays().items()}
        arrays.update({f"proposal__{k}": v for k, v in self.proposals.to_arrays().items()})
        arrays.update({f"kept__{k}": np.stack(v) for k, v in self._kept.items()})
        if self._kept_loglik:
            arrays["kept_loglik"] = np.stack(self._kept_loglik)
        meta = {
            "iteration": self.iteration,
            "config": self.config.model_dump(mode="json"),
            "rng": {name: _jsonable(g.bit_generator.state) for name, g in self.streams.items()},
        }
        with open(path, "wb") as f:
            np.savez_compressed(f, __meta__=np.array(json.dumps(meta)), **arrays)
        logger.info(f"Checkpoint written at iteration {self.iteration}",
                    extra={"run_id": self.run_id, "iteration": self.iteration, "block": "checkpoint"})
        return path

    def load_checkpoint(self, path: Union[str, Path]) -> None:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            state = {k[len("state__"):]: data[k] for k in data.files if k.startswith("state__")}
            proposal = {k[len("proposal__"):]: data[k] for k in data.files if k.startswith("proposal__")}
            kept = {k[len("kept__"):]: data[k] for k in data.files if k.startswith("kept__")}
            kept_loglik = data["kept_loglik"] if "kept_loglik" in data.files else None
        self.state = ChainState.from_arrays(state)
        self.proposals.load_arrays(proposal)
        for name, g in self.streams.items():
            g.bit_generator.state = _from_jsonable(meta["rng"][name])
        self._kept = {k: list(v) for k, v in kept.items()}
        self._kept_loglik = list(kept_loglik) if kept_loglik is not None else []
        self.iteration = int(meta["iteration"])
        self.model.projections.clear()
        self.ws = Workspace(self.model, self.state)
        logger.info(f"Resumed from checkpoint at iteration {self.iteration}",
                    extra={"run_id": self.run_id, "iteration": self.iteration, "block": "checkpoint"})


def run_chain(model: SnowDensityModel, config: ChainConfig, run_id: str = "",
              header: Optional[Dict[str, Any]] = None,
              checkpoint_path: Optional[Union[str, Path]] = None,
              resume: bool = False) -> ChainArchive:
    """Run one chain to completion, optionally resuming from a checkpoint"""
    chain = MetropolisWithinGibbs(model, config, run_id=run_id, header=header)
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        chain.load_checkpoint(checkpoint_path)
    return chain.run(checkpoint_path=checkpoint_path)
