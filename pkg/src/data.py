"""CSV and schema loading, target extraction and the stratified train/validation split."""
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from loguru import logger
from pydantic import ValidationError
from sklearn.model_selection import train_test_split

from exceptions import DataError, InvalidArgumentError, SchemaError
from models import Task
from preprocess import ColumnKind, DatasetSchema


def load_csv(path: Union[str, Path]) -> pd.DataFrame:
    """
    Read a CSV with a header row.

    Raises:
        DataError: If the file is missing or unreadable
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Data file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"Could not read CSV {path}: {e}") from e
    logger.info(f"Loaded {len(frame)} rows x {len(frame.columns)} columns from {path}")
    return frame


def load_schema(path: Union[str, Path]) -> DatasetSchema:
    """
    Read a flat YAML mapping of column name -> numeric | categorical | target.

    Raises:
        SchemaError: If the file is missing, malformed or declares no single target
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"Schema file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SchemaError(f"Schema file is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise SchemaError("schema must be a mapping of column -> kind", {"path": str(path)})
    try:
        schema = DatasetSchema(columns={str(k): v for k, v in raw.items()})
    except ValidationError as e:
        raise SchemaError(f"invalid schema: {e.errors()[0]['msg']}", {"path": str(path)}) from e
    logger.debug(f"Loaded schema with {len(schema.features)} features, target '{schema.target}'")
    return schema


def infer_schema(frame: pd.DataFrame, target: str) -> DatasetSchema:
    """Numeric-vs-non-numeric inference, used when no schema file is given."""
    if target not in frame.columns:
        raise SchemaError("target column not in data", {"target": target})
    columns = {}
    for name in frame.columns:
        if name == target:
            columns[name] = ColumnKind.TARGET
        elif pd.api.types.is_numeric_dtype(frame[name]):
            columns[name] = ColumnKind.NUMERIC
        else:
            columns[name] = ColumnKind.CATEGORICAL
    return DatasetSchema(columns=columns)


def has_target(frame: pd.DataFrame, schema: DatasetSchema) -> bool:
    return schema.target in frame.columns


def extract_targets(frame: pd.DataFrame, schema: DatasetSchema, task: Task) -> np.ndarray:
    """
    Target column as float64.

    Raises:
        SchemaError: If the target column is absent
        DataError: On missing/non-numeric targets, or binary targets outside {0, 1}
    """
    if schema.target not in frame.columns:
        raise SchemaError("target column not in data", {"target": schema.target})
    y = pd.to_numeric(frame[schema.target], errors="coerce").to_numpy(dtype=np.float64)
    if np.isnan(y).any():
        raise DataError("targets contain missing or non-numeric values", {"count": int(np.isnan(y).sum())})
    if task == Task.BINARY and not np.isin(y, (0.0, 1.0)).all():
        raise DataError("binary targets must be 0 or 1", {"values": sorted(set(np.unique(y).tolist()))[:5]})
    return y


def split_train_val(
    frame: pd.DataFrame,
    targets: Optional[np.ndarray],
    val_fraction: float,
    seed: int,
    stratify: bool,
) -> Tuple[pd.DataFrame, pd.DataFrame, Optional[np.ndarray], Optional[np.ndarray]]:
    """Random (stratified for binary targets) split; identical for a fixed seed."""
    if not 0.0 < val_fraction < 1.0:
        raise InvalidArgumentError("val_fraction must be in (0, 1)", {"val_fraction": val_fraction})
    if len(frame) < 2:
        raise DataError("need at least 2 rows to split", {"rows": len(frame)})
    index = np.arange(len(frame))
    train_idx, val_idx = train_test_split(
        index,
        test_size=val_fraction,
        random_state=seed,
        stratify=targets if (stratify and targets is not None) else None,
    )
    y_train = targets[train_idx] if targets is not None else None
    y_val = targets[val_idx] if targets is not None else None
    logger.info(f"Split {len(frame)} rows into {len(train_idx)} train / {len(val_idx)} validation")
    return (frame.iloc[train_idx].reset_index(drop=True), frame.iloc[val_idx].reset_index(drop=True),
            y_train, y_val)
