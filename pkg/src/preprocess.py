"""
Target encoding of categoricals followed by a per-feature quantile transform
to a standard Gaussian. Fitted state is plain pydantic data so it can travel
inside the model container.
"""
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import ndtri

from exceptions import InvalidArgumentError, InvalidStateError, SchemaError

# Gaussian deviates are clipped to this many standard deviations.
DEVIATE_CLIP = 8.0


class ColumnKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TARGET = "target"


class DatasetSchema(BaseModel):
    """Column name -> kind, in file order. Exactly one target column."""

    model_config = ConfigDict(frozen=True)

    columns: Dict[str, ColumnKind] = Field(..., description="Column kinds in declaration order")

    @model_validator(mode="after")
    def check_target(self) -> "DatasetSchema":
        targets = [name for name, kind in self.columns.items() if kind == ColumnKind.TARGET]
        if len(targets) != 1:
            raise ValueError(f"schema must declare exactly one target column, found {len(targets)}")
        if len(self.columns) < 2:
            raise ValueError("schema must declare at least one feature column")
        return self

    @property
    def target(self) -> str:
        return next(name for name, kind in self.columns.items() if kind == ColumnKind.TARGET)

    @property
    def features(self) -> List[str]:
        return [name for name, kind in self.columns.items() if kind != ColumnKind.TARGET]

    @property
    def categorical(self) -> List[str]:
        return [name for name, kind in self.columns.items() if kind == ColumnKind.CATEGORICAL]


class QuantileTransform(BaseModel):
    """Sorted reference quantiles of one feature paired with Gaussian deviates."""

    model_config = ConfigDict(frozen=True)

    references: List[float] = Field(..., description="Nondecreasing reference quantiles")
    deviates: List[float] = Field(..., description="Phi^-1 of equally spaced probabilities, clipped")

    @model_validator(mode="after")
    def check_shape(self) -> "QuantileTransform":
        if len(self.references) != len(self.deviates) or len(self.references) < 2:
            raise ValueError("references and deviates must have the same length >= 2")
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Monotone map to Gaussian deviates; values outside the fitted range clamp."""
        refs = np.asarray(self.references)
        devs = np.asarray(self.deviates)
        values = np.asarray(values, dtype=np.float64)
        # Averaging the forward and reversed interpolation handles repeated references.
        forward = np.interp(values, refs, devs)
        backward = -np.interp(-values, -refs[::-1], -devs[::-1])
        return 0.5 * (forward + backward)

    def inverse(self, deviates: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(deviates, dtype=np.float64), self.deviates, self.references)


class TargetEncoder(BaseModel):
    """Smoothed per-category target means; unseen categories map to the global mean."""

    model_config = ConfigDict(frozen=True)

    mapping: Dict[str, float] = Field(..., description="category -> encoded value")
    fallback: float = Field(..., description="Global target mean")
    smoothing: float = Field(default=10.0, ge=0.0, description="Prior weight m")

    def transform(self, values: Sequence) -> np.ndarray:
        return np.array([self.mapping.get(_category_key(v), self.fallback) for v in values], dtype=np.float64)


def _category_key(value) -> str:
    """Canonical string key; an integral float and the matching int share one key."""
    if value is None or (isinstance(value, (float, np.floating)) and np.isnan(value)):
        return "nan"
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value)


def fit_quantile(
    column: np.ndarray,
    n_bins: int = 2000,
    noise: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> QuantileTransform:
    """
    Fit a Gaussian quantile transform to one column.

    Gaussian noise of scale noise * std (noise itself for a constant column)
    is added to the fitting copy only, which breaks ties.

    Raises:
        InvalidArgumentError: If fewer than 2 finite values are available
    """
    column = np.asarray(column, dtype=np.float64)
    column = column[np.isfinite(column)]
    if column.size < 2:
        raise InvalidArgumentError("quantile transform needs at least 2 finite values", {"size": int(column.size)})
    rng = rng if rng is not None else np.random.default_rng(0)

    std = float(column.std())
    scale = noise * std if std > 0 else noise
    noisy = column + rng.normal(0.0, scale, size=column.shape)

    count = min(n_bins, noisy.size)
    probs = np.linspace(0.0, 1.0, count)
    references = np.maximum.accumulate(np.quantile(noisy, probs))
    with np.errstate(divide="ignore"):
        deviates = np.clip(ndtri(probs), -DEVIATE_CLIP, DEVIATE_CLIP)
    return QuantileTransform(references=references.tolist(), deviates=deviates.tolist())


def fit_target_encoding(column: Sequence, targets: np.ndarray, smoothing: float = 10.0) -> TargetEncoder:
    """category c -> (sum of y over c + m * y_bar) / (count(c) + m)."""
    values = [_category_key(v) for v in column]
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if not values:
        raise InvalidArgumentError("cannot target-encode an empty column")
    if len(values) != targets.size:
        raise InvalidArgumentError("column and targets differ in length", {"column": len(values), "targets": targets.size})

    global_mean = float(targets.mean())
    stats = pd.DataFrame({"c": values, "y": targets}).groupby("c")["y"].agg(["sum", "count"])
    mapping = {
        str(category): float((row["sum"] + smoothing * global_mean) / (row["count"] + smoothing))
        for category, row in stats.iterrows()
    }
    return TargetEncoder(mapping=mapping, fallback=global_mean, smoothing=smoothing)


class Pipeline(BaseModel):
    """
    Fitted preprocessing: target encoding, mean imputation, quantile transform.

    Feature order in `feature_names` is the column order of the model input.
    """

    feature_names: List[str] = Field(..., description="Model input columns, in order")
    categorical: List[str] = Field(default_factory=list, description="Target-encoded columns")
    target: Optional[str] = Field(default=None, description="Target column name")
    encoders: Dict[str, TargetEncoder] = Field(default_factory=dict)
    means: Dict[str, float] = Field(default_factory=dict, description="Imputation values for numeric columns")
    quantiles: Dict[str, QuantileTransform] = Field(default_factory=dict)
    fitted: bool = Field(default=False)

    def check_columns(self, frame: pd.DataFrame) -> None:
        """
        Raises:
            SchemaError: If a feature column is missing or an unknown column is present
        """
        missing = [c for c in self.feature_names if c not in frame.columns]
        if missing:
            raise SchemaError("missing feature columns", {"missing": missing})
        known = set(self.feature_names) | ({self.target} if self.target else set())
        unknown = [c for c in frame.columns if c not in known]
        if unknown:
            raise SchemaError("unknown columns", {"unknown": unknown})

    def encode(self, frame: pd.DataFrame) -> np.ndarray:
        """Raw frame -> [n, D] floats after encoding and imputation, before the quantile map."""
        columns = []
        for name in self.feature_names:
            if name in self.encoders:
                columns.append(self.encoders[name].transform(frame[name].tolist()))
                continue
            values = pd.to_numeric(frame[name], errors="coerce").to_numpy(dtype=np.float64)
            columns.append(np.where(np.isnan(values), self.means[name], values))
        return np.stack(columns, axis=1) if columns else np.zeros((len(frame), 0))

    def transform_array(self, frame: pd.DataFrame) -> np.ndarray:
        if not self.fitted:
            raise InvalidStateError("pipeline is not fitted")
        self.check_columns(frame)
        encoded = self.encode(frame)
        if encoded.shape[0] == 0:
            return encoded.reshape(0, len(self.feature_names))
        return np.stack(
            [self.quantiles[name].transform(encoded[:, j]) for j, name in enumerate(self.feature_names)],
            axis=1,
        )

    def inverse_numeric(self, name: str, values: np.ndarray) -> np.ndarray:
        """Model units -> raw units (for categoricals: the target-encoded value)."""
        if name not in self.quantiles:
            raise SchemaError("unknown feature", {"feature": name})
        return self.quantiles[name].inverse(values)

    def category_labels(self, name: str, values: np.ndarray) -> List[str]:
        """Nearest category label for each model-unit value of a categorical feature."""
        encoder = self.encoders.get(name)
        if encoder is None:
            raise SchemaError("feature is not categorical", {"feature": name})
        labels = list(encoder.mapping)
        points = self.quantiles[name].transform(np.array([encoder.mapping[c] for c in labels]))
        return [labels[int(np.argmin(np.abs(points - v)))] for v in np.asarray(values)]


def fit_pipeline(
    frame: pd.DataFrame,
    schema: DatasetSchema,
    targets: Optional[np.ndarray] = None,
    n_bins: int = 2000,
    noise: float = 1e-5,
    smoothing: float = 10.0,
    seed: int = 0,
) -> Pipeline:
    """
    Fit encoders, imputation means and quantile transforms on training rows.

    Raises:
        SchemaError: If columns are missing, or categoricals need encoding but no targets are given
    """
    missing = [c for c in schema.features if c not in frame.columns]
    if missing:
        raise SchemaError("missing feature columns", {"missing": missing})
    if schema.categorical and targets is None:
        raise SchemaError(
            "target encoding needs labels; categorical columns present without a target",
            {"categorical": schema.categorical}
        )

    pipeline = Pipeline(feature_names=schema.features, categorical=schema.categorical, target=schema.target)
    for name in schema.categorical:
        pipeline.encoders[name] = fit_target_encoding(frame[name].tolist(), targets, smoothing)
    for name in schema.features:
        if name in pipeline.encoders:
            continue
        values = pd.to_numeric(frame[name], errors="coerce").to_numpy(dtype=np.float64)
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            raise SchemaError("numeric column has no numeric values", {"column": name})
        pipeline.means[name] = float(finite.mean())

    encoded = pipeline.encode(frame)
    rng = np.random.default_rng(seed)
    for j, name in enumerate(schema.features):
        pipeline.quantiles[name] = fit_quantile(encoded[:, j], n_bins=n_bins, noise=noise, rng=rng)
    pipeline.fitted = True
    logger.info(
        f"Fitted preprocessing on {len(frame)} rows: "
        f"{len(schema.features)} features ({len(schema.categorical)} categorical)"
    )
    return pipeline


def transform(pipeline: Pipeline, frame: pd.DataFrame) -> torch.Tensor:
    """Raw rows -> [n, D] float64 model input."""
    return torch.from_numpy(pipeline.transform_array(frame).astype(np.float64))


def inverse_numeric(pipeline: Pipeline, name: str, values: np.ndarray) -> np.ndarray:
    return pipeline.inverse_numeric(name, values)
