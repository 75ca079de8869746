"""
CSV ingestion and output.

Inputs: data.csv with a header `y,<covariate names>` and meta.csv with a
header `covariate,<meta-covariate names>`, one row per covariate. Names use
only letters, digits and underscores. Outputs are written with 17
significant digits so re-reading reproduces every float exactly.
"""

import logging
import re
from pathlib import Path
from typing import Mapping, Tuple

import numpy as np
import pandas as pd

from selection.exceptions import ConstantColumn, DimensionMismatch, MalformedInput
from selection.services.linmodel import Dataset
from selection.services.priors import MetaCovariates

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r'^[A-Za-z0-9_]+$')
FLOAT_FORMAT = '%.17g'


def _read_table(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise MalformedInput(f"File not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedInput(f"Cannot parse {path}: {e}")
    bad = [name for name in frame.columns if not NAME_PATTERN.match(str(name))]
    if bad:
        raise MalformedInput(f"{path}: column names must match [A-Za-z0-9_]+, got {bad}")
    if frame.columns.duplicated().any():
        raise MalformedInput(f"{path}: duplicate column names")
    return frame


def _numeric(frame: pd.DataFrame, columns, path) -> np.ndarray:
    try:
        values = frame[list(columns)].apply(pd.to_numeric, errors='raise').to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise MalformedInput(f"{path}: non-numeric value ({e})")
    if not np.all(np.isfinite(values)):
        raise MalformedInput(f"{path}: missing or non-finite values")
    return values


def read_data_csv(path) -> Dataset:
    frame = _read_table(path)
    if 'y' not in frame.columns:
        raise MalformedInput(f"{path}: no 'y' column")
    names = tuple(c for c in frame.columns if c != 'y')
    if not names:
        raise DimensionMismatch(f"{path}: no covariate columns")
    if frame.empty:
        raise DimensionMismatch(f"{path}: no data rows")
    values = _numeric(frame, ('y',) + names, path)
    return Dataset(values[:, 0], values[:, 1:], names=names)


def read_meta_csv(path, covariate_names: Tuple[str, ...], center: bool = False) -> MetaCovariates:
    """
    Meta-covariates aligned to the data columns, with an intercept prepended.

    Raises:
        DimensionMismatch: row count differs from p or covariate names disagree.
        ConstantColumn: a supplied meta-covariate does not vary.
    """
    frame = _read_table(path)
    if 'covariate' not in frame.columns:
        raise MalformedInput(f"{path}: no 'covariate' column")
    p = len(covariate_names)
    if len(frame) != p:
        raise DimensionMismatch(f"meta.csv has {len(frame)} rows but data.csv has {p} covariates")
    listed = list(frame['covariate'])
    if sorted(listed) != sorted(covariate_names):
        missing = sorted(set(covariate_names) - set(listed))
        extra = sorted(set(listed) - set(covariate_names))
        raise DimensionMismatch(f"meta.csv covariates do not match data.csv (missing {missing}, unknown {extra})")
    frame = frame.set_index('covariate').loc[list(covariate_names)]
    names = tuple(frame.columns)
    if 'intercept' in names:
        raise MalformedInput(f"{path}: 'intercept' is added automatically and cannot be a column")
    values = _numeric(frame, names, path) if names else np.zeros((p, 0))
    constant = [name for name, column in zip(names, values.T) if np.ptp(column) == 0]
    if constant:
        raise ConstantColumn(f"Constant meta-covariate columns: {', '.join(constant)}")
    return MetaCovariates.from_columns(values, names, add_intercept=True, center=center)


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def write_summary(values: Mapping[str, object], path) -> Path:
    """key = value lines; floats with 17 significant digits."""
    path = Path(path)
    lines = []
    for key, value in values.items():
        if isinstance(value, (float, np.floating)):
            value = FLOAT_FORMAT % value
        lines.append(f"{key} = {value}")
    path.write_text('\n'.join(lines) + '\n')
    return path


def read_summary(path) -> dict:
    values = {}
    for line in Path(path).read_text().splitlines():
        if '=' in line:
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()
    return values

