"""Posterior draw archive and its on-disk format"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Sequence, Union
import numpy as np
from backend.app.core.state import ChainState
from backend.app.exceptions import DatasetError
from backend.app.models import ModelOptions

ARCHIVE_FORMAT = "snowdensity-archive v1"
HEADER_KEY = "__header__"


@dataclass
class ChainArchive:
    """
    Thinned post-burn-in draws of every parameter, the per-observation
    log-likelihood matrix (draws x N) and block acceptance rates
    """
    draws: Dict[str, np.ndarray]
    loglik: np.ndarray
    acceptance: Dict[str, float] = field(default_factory=dict)
    header: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.loglik.shape[0]

    @property
    def options(self) -> ModelOptions:
        return ModelOptions.model_validate(self.header["model"])

    @property
    def site_coords(self) -> np.ndarray:
        return np.asarray(self.header["site_coords"], dtype=float)

    def state(self, d: int) -> ChainState:
        return ChainState.from_arrays({name: values[d] for name, values in self.draws.items()})

    def subset(self, indices: Sequence[int]) -> "ChainArchive":
        idx = np.asarray(indices, dtype=int)
        return ChainArchive(
            draws={k: v[idx] for k, v in self.draws.items()},
            loglik=self.loglik[idx],
            acceptance=dict(self.acceptance),
            header=dict(self.header),
        )


def save_archive(archive: ChainArchive, path: Union[str, Path]) -> Path:
    """Write draws as named npz columns with a JSON header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(archive.header)
    header["format"] = ARCHIVE_FORMAT
    header["acceptance"] = archive.acceptance
    header["dims"] = {name: list(values.shape[1:]) for name, values in archive.draws.items()}
    header["n_draws"] = archive.n_draws
    arrays = {f"draw__{name}": values for name, values in archive.draws.items()}
    with open(path, "wb") as f:
        np.savez_compressed(f, loglik=archive.loglik, **arrays,
                            **{HEADER_KEY: np.array(json.dumps(header, sort_keys=True))})
    return path


def load_archive(path: Union[str, Path]) -> ChainArchive:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data[HEADER_KEY]))
        draws = {key[len("draw__"):]: data[key] for key in data.files if key.startswith("draw__")}
        loglik = data["loglik"]
    if header.get("format") != ARCHIVE_FORMAT:
        raise DatasetError(f"{path} is not a {ARCHIVE_FORMAT} file", path=str(path))
    return ChainArchive(draws=draws, loglik=loglik, acceptance=header.get("acceptance", {}), header=header)
