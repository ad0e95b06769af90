"""Input validation for core and site tables"""
from typing import Iterable, List
import numpy as np
import pandas as pd
from backend.app.exceptions import DatasetError

# Line 1 is the format header, line 2 the column names
FIRST_DATA_LINE = 3


def validate_header(first_line: str, expected: str, path: str) -> None:
    """Check the format header on the first line of a table"""
    if first_line.strip() != expected:
        raise DatasetError(f"expected header '{expected}', found '{first_line.strip()}'",
                           line=1, path=path)


def validate_columns(frame: pd.DataFrame, columns: List[str], path: str) -> None:
    """Column names must match the schema exactly and in order"""
    if list(frame.columns) != columns:
        raise DatasetError(f"columns {list(frame.columns)} do not match schema {columns}", line=2, path=path)


def coerce_numeric(frame: pd.DataFrame, columns: Iterable[str], path: str,
                   optional: Iterable[str] = ()) -> pd.DataFrame:
    """
    Convert columns to floats
    Empty cells are allowed only in optional columns; anything else that does
    not parse is reported with its line number
    """
    frame = frame.copy()
    optional = set(optional)
    for col in columns:
        raw = frame[col]
        values = pd.to_numeric(raw, errors="coerce")
        bad = values.isna() & (raw.notna() | (col not in optional))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DatasetError(f"column '{col}': non-numeric value '{raw.iloc[row]}'",
                               line=row + FIRST_DATA_LINE, path=path)
        frame[col] = values.astype(float)
    return frame


def validate_coordinates(lat: float, lon: float, line: int) -> None:
    if not -90.0 <= lat <= 90.0:
        raise DatasetError(f"latitude {lat} outside [-90, 90]", line=line)
    if not -180.0 <= lon <= 360.0:
        raise DatasetError(f"longitude {lon} outside [-180, 360]", line=line)


def validate_positive(name: str, value: float, line: int, **context) -> None:
    if not np.isfinite(value) or value <= 0:
        raise DatasetError(f"{name} must be positive, got {value}", line=line, **context)


def validate_core_rows(core_id: str, depths: np.ndarray, density: np.ndarray, first_line: int) -> None:
    """
    Depths must be non-negative and non-decreasing, densities positive
    Densities above the ice density are kept; the model treats them as noise
    """
    if depths.size == 0:
        raise DatasetError(f"core {core_id}: no measurements", line=first_line, core_id=core_id)
    negative = np.flatnonzero(depths < 0)
    if negative.size:
        raise DatasetError(f"core {core_id}: negative depth {depths[negative[0]]}",
                           line=first_line + int(negative[0]), core_id=core_id)
    unsorted = np.flatnonzero(np.diff(depths) < 0)
    if unsorted.size:
        raise DatasetError(f"core {core_id}: depths not sorted",
                           line=first_line + int(unsorted[0]) + 1, core_id=core_id)
    bad = np.flatnonzero(~(density > 0))
    if bad.size:
        raise DatasetError(f"core {core_id}: density must be positive, got {density[bad[0]]}",
                           line=first_line + int(bad[0]), core_id=core_id)
