"""Analysis pipeline: simulate -> fit -> waic / predict / summarize, shared by the CLI and the API"""
import json
import uuid
from pathlib import Path
from typing import Dict, List, Optional
import numpy as np
import pandas as pd
from backend.app import __version__
from backend.app.config import config_hash, settings
from backend.app.core.likelihood import SnowDensityModel
from backend.app.core.physics import THETA_NAMES
from backend.app.core.spatial import SiteSet, fit_semivariogram
from backend.app.data.dataset import CoreDataset, load_dataset, save_dataset
from backend.app.data.simulate import save_truth, simulate_dataset
from backend.app.exceptions import ConfigError, DatasetError
from backend.app.inference.prediction import (
    build_grid, grid_draws, interpolate_covariates, map_table, predict_profile, stage_comparison,
)
from backend.app.inference.summary import parameter_correlations, profile_comparison, site_medians, summarize
from backend.app.inference.waic import compare_waic, waic
from backend.app.models import ModelOptions, RunConfig, WaicReport
from backend.app.sampler.archive import ChainArchive, load_archive, save_archive
from backend.app.sampler.chain import run_chain
from backend.app.utils.logger import logger

COVARIATE_COLUMNS = ("temperature", "smb")


def error_model_variants(base: ModelOptions) -> List[ModelOptions]:
    """The five error-model variants of the default comparison sweep"""
    grid = [("normal", True, True), ("t", False, False), ("t", True, False), ("t", False, True), ("t", True, True)]
    variants = []
    for family, weighted, hierarchical in grid:
        name = f"{family}_{'weighted' if weighted else 'unweighted'}_{'hier' if hierarchical else 'flat'}"
        variants.append(base.model_copy(update={
            "name": name, "error_family": family, "weighted": weighted, "hierarchical": hierarchical,
        }))
    return variants


class AnalysisPipeline:
    """
    One analysis run over a configuration and an output directory
    Every artifact written carries the run's provenance: config hash, seed and code version.
    """

    def __init__(self, config: RunConfig, out_dir: Optional[str] = None, seed: Optional[int] = None,
                 threads: Optional[int] = None, run_id: Optional[str] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else settings.out_path
        self.seed = config.chain.seed if seed is None else seed
        self.threads = threads or settings.threads
        self.run_id = run_id or str(uuid.uuid4())
        self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- paths and provenance -------------------------------------------------

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out_dir / p

    @property
    def cores_path(self) -> Path:
        return self.path(self.config.paths.cores)

    @property
    def sites_path(self) -> Path:
        return self.path(self.config.paths.sites)

    @property
    def archive_path(self) -> Path:
        return self.path(self.config.paths.archive)

    def provenance(self) -> Dict[str, str]:
        return {
            "config_hash": config_hash(self.config),
            "seed": str(self.seed),
            "version": __version__,
            "run_id": self.run_id,
        }

    def _log(self, message: str) -> None:
        logger.info(message, extra={"run_id": self.run_id})

    def _write_frame(self, frame: pd.DataFrame, name: str) -> Path:
        """Delimited table preceded by '#'-prefixed provenance lines"""
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            for key, value in self.provenance().items():
                f.write(f"# {key}={value}\n")
            frame.to_csv(f, index=False, lineterminator="\n")
        return path

    def _write_json(self, payload: Dict, name: str) -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"provenance": self.provenance(), **payload}, f, indent=2, sort_keys=True)
        return path

    # -- steps ------------------------------------------------------------------

    def simulate(self) -> Dict[str, str]:
        dataset, truth = simulate_dataset(self.config, self.seed)
        save_dataset(dataset, self.cores_path, self.sites_path, self.provenance())
        truth_path = save_truth(truth, self.path("truth.json"))
        self._log(f"Simulated dataset: {dataset.summary()}")
        return {"cores": str(self.cores_path), "sites": str(self.sites_path), "truth": str(truth_path)}

    def load(self) -> CoreDataset:
        return load_dataset(self.cores_path, self.sites_path)

    def fit(self, options: Optional[ModelOptions] = None, archive_path: Optional[Path] = None,
            resume: bool = False) -> ChainArchive:
        """Run the sampler on the configured dataset and persist the archive"""
        options = options or self.config.model
        archive_path = archive_path or self.archive_path
        dataset = self.load()
        model = SnowDensityModel(dataset, options, self.config.priors, threads=self.threads)
        chain_config = self.config.chain.model_copy(update={"seed": self.seed})
        checkpoint = archive_path.with_name(archive_path.stem + ".checkpoint.npz")
        archive = run_chain(model, chain_config, run_id=self.run_id, header={"provenance": self.provenance()},
                            checkpoint_path=checkpoint if chain_config.checkpoint_every else None,
                            resume=resume)
        save_archive(archive, archive_path)
        self._log(f"Saved {archive.n_draws} draws to {archive_path}")
        return archive

    def load_archive(self) -> ChainArchive:
        if not self.archive_path.exists():
            raise DatasetError(f"no archive at {self.archive_path}; run fit first", path=str(self.archive_path))
        return load_archive(self.archive_path)

    def waic(self, archive: Optional[ChainArchive] = None) -> WaicReport:
        report = waic((archive or self.load_archive()).loglik)
        self._write_json({"waic": report.model_dump(exclude={"pointwise_elpd"})}, "waic.json")
        self._log(f"WAIC {report.waic:.2f} (p_waic {report.p_waic:.2f}, SE {report.se:.2f})")
        return report

    def summarize(self) -> Dict[str, str]:
        archive = self.load_archive()
        artifacts = {
            "summary": self._write_frame(summarize(archive), "summary.csv"),
            "site_medians": self._write_frame(site_medians(archive), "site_medians.csv"),
            "correlations": self._write_frame(parameter_correlations(archive).reset_index(names="parameter"),
                                              "correlations.csv"),
        }
        core_id = self.config.prediction.profile_core
        if core_id is not None:
            frame = profile_comparison(archive, self.load(), core_id, rng=np.random.default_rng(self.seed))
            artifacts["profile_comparison"] = self._write_frame(frame, "profile_comparison.csv")
        return {k: str(v) for k, v in artifacts.items()}

    def predict(self) -> Dict[str, str]:
        """Profiles at configured locations, grid maps and stage comparisons"""
        cfg = self.config.prediction
        archive = self.load_archive()
        dataset = self.load()
        rng = np.random.default_rng(self.seed)
        artifacts: Dict[str, Path] = {}

        frames = []
        for j, location in enumerate(cfg.locations):
            pred = predict_profile(archive, location, cfg.depths, rng, cfg.smoothing_at_new_sites, cfg.max_draws)
            frames.append(pred.to_frame(cfg.interval).assign(location=j, lat=location.lat, lon=location.lon))
        if frames:
            artifacts["profiles"] = self._write_frame(pd.concat(frames, ignore_index=True), "profiles.csv")

        if dataset.n_sites >= 3:
            grid = build_grid(dataset.site_coords, cfg.grid_points)
            draws = grid_draws(archive, grid, interpolate_covariates(dataset, grid), rng, cfg.max_draws)
            artifacts["map"] = self._write_frame(map_table(grid, draws), "map.csv")
            k = np.stack([draws[f"k{j}"] for j in range(1, 5)], axis=-1)
            stages = stage_comparison(k)
            stages.insert(0, "lon", grid[:, 1])
            stages.insert(0, "lat", grid[:, 0])
            artifacts["stage_comparison"] = self._write_frame(stages, "stage_comparison.csv")
        else:
            logger.warning("Fewer than three sites: skipping the prediction grid", extra={"run_id": self.run_id})
        return {k: str(v) for k, v in artifacts.items()}

    def semivariogram(self, parameter: str = "alpha", n_bins: int = 12) -> Dict[str, str]:
        """
        Empirical and fitted semivariogram of a site quantity: a covariate column,
        or the posterior median of a site parameter from the archive
        """
        dataset = self.load()
        if parameter in COVARIATE_COLUMNS:
            values = np.array([getattr(c, parameter) for c in dataset.site_covariates()])
        elif parameter in THETA_NAMES:
            values = np.median(self.load_archive().draws["theta"], axis=0)[:, THETA_NAMES.index(parameter)]
        else:
            raise ConfigError(f"unknown semivariogram quantity '{parameter}'",
                              allowed=list(COVARIATE_COLUMNS) + list(THETA_NAMES))
        fit = fit_semivariogram(values, SiteSet.from_coords(dataset.site_coords), n_bins=n_bins)
        table = self._write_frame(fit.to_frame(), f"semivariogram_{parameter}.csv")
        params = self._write_json({"parameter": parameter, "nugget": fit.nugget, "partial_sill": fit.partial_sill,
                                   "range_km": fit.range_km, "effective_range_km": 3.0 * fit.range_km},
                                  f"semivariogram_{parameter}.json")
        return {"table": str(table), "fit": str(params)}

    def compare(self) -> pd.DataFrame:
        """Fit every configured variant (the error-model sweep by default) and rank by WAIC"""
        variants = self.config.compare or error_model_variants(self.config.model)
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"comparison variants need distinct names, got {names}")
        reports: Dict[str, WaicReport] = {}
        for options in variants:
            self._log(f"Comparison fit: {options.name}")
            archive = self.fit(options, archive_path=self.path(f"archive_{options.name}.npz"))
            reports[options.name] = waic(archive.loglik)
        table = compare_waic(reports)
        described = pd.DataFrame([{
            "model": v.name, "error_family": v.error_family, "weighted": v.weighted,
            "hierarchical": v.hierarchical, "cross_covariance": v.cross_covariance.kind,
            "smoothing": "none" if v.smoothing is None else f"degree{v.smoothing.degree}_knots{v.smoothing.n_knots}",
        } for v in variants])
        table = described.merge(table, on="model").sort_values("waic", kind="stable").reset_index(drop=True)
        self._write_frame(table, "compare.csv")
        return table
