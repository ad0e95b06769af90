"""Core dataset: records, loading, validation and canonical saving"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import numpy as np
import pandas as pd
from backend.app.core.physics import SiteCovariates
from backend.app.core.spatial import SiteSet
from backend.app.exceptions import DatasetError
from backend.app.utils.logger import logger
from backend.app.utils.validators import (
    FIRST_DATA_LINE, coerce_numeric, validate_columns, validate_coordinates,
    validate_core_rows, validate_header, validate_positive,
)

CORES_HEADER = "# snowdensity-cores v1"
SITES_HEADER = "# snowdensity-sites v1"
CORE_COLUMNS = ["core_id", "lat", "lon", "expedition", "dx", "depth", "density"]
SITE_COLUMNS = ["lat", "lon", "temperature", "smb"]

PathLike = Union[str, Path]


@dataclass
class CoreRecord:
    """One snow/ice core with its site covariates"""
    core_id: str
    lat: float
    lon: float
    expedition: str
    dx: float
    depths: np.ndarray
    density: np.ndarray
    temperature: float
    smb: float

    @property
    def covariates(self) -> SiteCovariates:
        return SiteCovariates(temperature=self.temperature, smb=self.smb)

    @property
    def coords(self) -> Tuple[float, float]:
        return (self.lat, self.lon)

    @property
    def n_obs(self) -> int:
        return self.depths.size


@dataclass
class CoreDataset:
    """
    Validated collection of cores
    Cores sharing coordinates share a site; sites and expeditions are indexed
    in order of first appearance.
    """
    cores: List[CoreRecord]
    site_coords: np.ndarray = field(init=False)
    site_index: np.ndarray = field(init=False)
    expeditions: List[str] = field(init=False)
    expedition_index: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.cores:
            raise DatasetError("no cores")
        ids = [c.core_id for c in self.cores]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate core_id among {sorted(ids)}")

        site_of: Dict[Tuple[float, float], int] = {}
        exp_of: Dict[str, int] = {}
        for core in self.cores:
            site_of.setdefault(core.coords, len(site_of))
            exp_of.setdefault(core.expedition, len(exp_of))
        self.site_coords = np.array(list(site_of.keys()), dtype=float)
        self.site_index = np.array([site_of[c.coords] for c in self.cores], dtype=int)
        self.expeditions = list(exp_of.keys())
        self.expedition_index = np.array([exp_of[c.expedition] for c in self.cores], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum([c.n_obs for c in self.cores])])

    @property
    def n_cores(self) -> int:
        return len(self.cores)

    @property
    def n_sites(self) -> int:
        return self.site_coords.shape[0]

    @property
    def n_obs(self) -> int:
        return int(self.offsets[-1])

    @property
    def dx(self) -> np.ndarray:
        return np.array([c.dx for c in self.cores])

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([c.density for c in self.cores])

    def sites(self) -> SiteSet:
        return SiteSet.from_coords(self.site_coords)

    def site_covariates(self) -> List[SiteCovariates]:
        """Covariates of each site, taken from its first core"""
        first = {}
        for i, s in enumerate(self.site_index):
            first.setdefault(int(s), i)
        return [self.cores[first[s]].covariates for s in range(self.n_sites)]

    def cores_at_site(self, site: int) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.site_index == site)]

    def core_position(self, core_id: str) -> int:
        for i, core in enumerate(self.cores):
            if core.core_id == core_id:
                return i
        raise DatasetError(f"unknown core_id '{core_id}'", core_id=core_id)

    def summary(self) -> Dict[str, int]:
        return {"cores": self.n_cores, "sites": self.n_sites,
                "measurements": self.n_obs, "expeditions": len(self.expeditions)}


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _read_table(path: Path, header: str, columns: List[str], text_columns: List[str]) -> pd.DataFrame:
    if not path.exists():
        raise DatasetError(f"file not found: {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as f:
        first_line = f.readline()
    validate_header(first_line, header, str(path))
    try:
        frame = pd.read_csv(path, skiprows=1, dtype={c: str for c in text_columns},
                            keep_default_na=False, na_values=[""])
    except pd.errors.ParserError as e:
        raise DatasetError(f"malformed table: {e}", path=str(path)) from e
    except pd.errors.EmptyDataError:
        raise DatasetError("missing column header", line=2, path=str(path))
    validate_columns(frame, columns, str(path))
    return frame


def _load_sites(path: Path) -> Dict[Tuple[float, float], Tuple[float, float, int]]:
    frame = _read_table(path, SITES_HEADER, SITE_COLUMNS, [])
    frame = coerce_numeric(frame, SITE_COLUMNS, str(path))
    sites: Dict[Tuple[float, float], Tuple[float, float, int]] = {}
    for row, rec in enumerate(frame.itertuples(index=False)):
        line = row + FIRST_DATA_LINE
        validate_coordinates(rec.lat, rec.lon, line)
        validate_positive("temperature", rec.temperature, line)
        validate_positive("smb", rec.smb, line)
        key = (float(rec.lat), float(rec.lon))
        if key in sites:
            raise DatasetError(f"duplicate site ({rec.lat}, {rec.lon})", line=line, path=str(path))
        sites[key] = (float(rec.temperature), float(rec.smb), line)
    return sites


def load_dataset(cores_path: PathLike, sites_path: PathLike) -> CoreDataset:
    """
    Load and validate a core dataset
    Args:
        cores_path: long table of measurements, one row per (core, depth)
        sites_path: covariates per unique site
    Returns:
        CoreDataset; dx defaults to max depth / number of measurements
    """
    cores_path, sites_path = Path(cores_path), Path(sites_path)
    sites = _load_sites(sites_path)
    frame = _read_table(cores_path, CORES_HEADER, CORE_COLUMNS, ["core_id", "expedition"])
    if frame.empty:
        raise DatasetError("no cores", path=str(cores_path))
    frame = coerce_numeric(frame, ["lat", "lon", "dx", "depth", "density"], str(cores_path),
                           optional=("dx",))

    # consecutive rows with the same core_id form one core
    run_id = (frame["core_id"] != frame["core_id"].shift()).cumsum().to_numpy()
    seen: Dict[str, int] = {}
    cores: List[CoreRecord] = []
    for run in np.unique(run_id):
        rows = np.flatnonzero(run_id == run)
        first_line = int(rows[0]) + FIRST_DATA_LINE
        block = frame.iloc[rows]
        core_id = str(block["core_id"].iloc[0])
        if core_id in seen:
            raise DatasetError(f"duplicate core_id '{core_id}' (first seen on line {seen[core_id]})",
                               line=first_line, core_id=core_id)
        seen[core_id] = first_line

        for col in ("lat", "lon", "expedition", "dx"):
            values = block[col]
            constant = values.isna().all() or (values.notna().all() and values.nunique() == 1)
            if not constant:
                raise DatasetError(f"core {core_id}: column '{col}' varies within the core",
                                   line=first_line, core_id=core_id)

        lat, lon = float(block["lat"].iloc[0]), float(block["lon"].iloc[0])
        validate_coordinates(lat, lon, first_line)
        depths = block["depth"].to_numpy(dtype=float)
        density = block["density"].to_numpy(dtype=float)
        validate_core_rows(core_id, depths, density, first_line)

        dx = block["dx"].iloc[0]
        if pd.isna(dx):
            dx = depths.max() / depths.size
        validate_positive("dx", float(dx), first_line, core_id=core_id)

        site = sites.get((lat, lon))
        if site is None:
            raise DatasetError(f"core {core_id}: no covariates for site ({lat}, {lon})",
                               line=first_line, core_id=core_id)
        cores.append(CoreRecord(
            core_id=core_id, lat=lat, lon=lon, expedition=str(block["expedition"].iloc[0]),
            dx=float(dx), depths=depths, density=density, temperature=site[0], smb=site[1],
        ))

    dataset = CoreDataset(cores)
    logger.info(f"Loaded dataset: {dataset.summary()}")
    return dataset


# ---------------------------------------------------------------------------
# Saving
# ---------------------------------------------------------------------------

def cores_frame(dataset: CoreDataset) -> pd.DataFrame:
    rows = []
    for core in dataset.cores:
        for depth, rho in zip(core.depths, core.density):
            rows.append((core.core_id, core.lat, core.lon, core.expedition, core.dx, float(depth), float(rho)))
    return pd.DataFrame(rows, columns=CORE_COLUMNS)


def sites_frame(dataset: CoreDataset) -> pd.DataFrame:
    covs = dataset.site_covariates()
    return pd.DataFrame({
        "lat": dataset.site_coords[:, 0],
        "lon": dataset.site_coords[:, 1],
        "temperature": [c.temperature for c in covs],
        "smb": [c.smb for c in covs],
    }, columns=SITE_COLUMNS)


def _write_table(path: Path, header: str, frame: pd.DataFrame,
                 provenance: Optional[Dict[str, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header + "\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    if provenance:
        write_provenance_sidecar(path, provenance)


def write_provenance_sidecar(path: Path, provenance: Dict[str, str]) -> None:
    """Dataset files keep a fixed header, so their provenance lives next to them"""
    sidecar = path.with_suffix(path.suffix + ".provenance")
    sidecar.write_text("".join(f"{k}={v}\n" for k, v in provenance.items()), encoding="utf-8")


def save_dataset(dataset: CoreDataset, cores_path: PathLike, sites_path: PathLike,
                 provenance: Optional[Dict[str, str]] = None) -> None:
    """Write the canonical form: fixed column order, shortest round-trip floats"""
    _write_table(Path(cores_path), CORES_HEADER, cores_frame(dataset), provenance)
    _write_table(Path(sites_path), SITES_HEADER, sites_frame(dataset), provenance)
    logger.info(f"Saved dataset to {cores_path} and {sites_path}")
