"""
Flat run configuration: architecture, optimisation schedule, paths and seed.

Precedence: command-line overrides > config file > preset > defaults.
"""
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import settings
from exceptions import ConfigError
from models import Arch, GamMode, ModelConfig, Task, TrainConfig
from utils.atomic import atomic_write_text
from utils.preset_loader import load_preset


class RunConfig(BaseModel):
    """Every knob of a run. Serialises to a flat YAML file that reproduces the run."""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    # data
    data: Optional[str] = Field(default=None, description="Input CSV")
    schema_path: Optional[str] = Field(default=None, description="YAML schema: column -> numeric|categorical|target")
    model_path: Optional[str] = Field(default=None, description="Input model container (finetune/predict/explain)")
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR, description="Directory for written files")
    val_fraction: float = Field(default=0.2, gt=0.0, lt=1.0, description="Stratified validation split")
    label_fraction: Optional[float] = Field(default=None, gt=0.0, le=1.0, description="Labelled subset for finetuning")
    seed: int = Field(default=0, description="Seed for initialisation, splits, batches and masks")

    # architecture
    task: Task = Field(default=Task.REGRESSION)
    mode: GamMode = Field(default=GamMode.GAM)
    arch: Arch = Field(default=Arch.ATTENTION)
    num_layers: int = Field(default=3, ge=1)
    trees_per_layer: int = Field(default=666, ge=1, description="2000 trees in total over 3 layers")
    depth: int = Field(default=4, ge=1)
    addi_tree_dim: int = Field(default=0, ge=0)
    output_dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    last_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    colsample: float = Field(default=0.1, gt=0.0, le=1.0)
    l2_lambda: float = Field(default=1e-5, ge=0.0)
    attention_dim: int = Field(default=16, ge=0)
    anneal_steps: int = Field(default=4000, ge=0)
    min_temperature: float = Field(default=0.01, gt=0.0, lt=1.0)
    add_last_linear: bool = Field(default=True)
    gated: bool = Field(default=True)

    # optimisation
    lr: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=2048, ge=1)
    warmup_steps: int = Field(default=500, ge=0)
    plateau_patience_steps: int = Field(default=5000, ge=1)
    plateau_decay_factor: float = Field(default=0.2, gt=0.0, lt=1.0)
    early_stop_steps: int = Field(default=11000, ge=1)
    checkpoint_count: int = Field(default=5, ge=1)
    checkpoint_interval_steps: Optional[int] = Field(default=None, ge=1)
    eval_interval_steps: int = Field(default=200, ge=1)
    max_train_hours: float = Field(default=20.0, gt=0.0)
    max_steps: Optional[int] = Field(default=None, ge=0)
    mask_rate: float = Field(default=0.15, ge=0.0, lt=1.0)
    freeze_steps: int = Field(default=500, ge=0)
    qh_nu1: float = Field(default=0.7, ge=0.0, le=1.0)
    qh_nu2: float = Field(default=1.0, ge=0.0, le=1.0)
    beta1: float = Field(default=0.95, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.998, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)

    # runtime
    deterministic: bool = Field(default_factory=lambda: settings.DETERMINISTIC)
    threads: int = Field(default_factory=lambda: settings.THREADS, ge=0)

    # explanation
    bins: int = Field(default=256, ge=2, description="Quantile bins per feature for GA2M terms")
    audit: bool = Field(default=False, description="Report the reconstruction gap after explaining")
    weighted_purify: bool = Field(default=False, description="Purify with joint bin-count weights")
    term_csvs: bool = Field(default=True, description="Write per-term plot-data CSVs")

    def to_model_config(self, num_features: int, num_outputs: int = 1, task: Optional[Task] = None) -> ModelConfig:
        """
        Raises:
            ConfigError: If the architecture fields are inconsistent (e.g. GA2M with depth 1)
        """
        try:
            return ModelConfig(
                mode=self.mode,
                arch=self.arch,
                num_layers=self.num_layers,
                trees_per_layer=self.trees_per_layer,
                depth=self.depth,
                addi_tree_dim=self.addi_tree_dim,
                output_dropout=self.output_dropout,
                last_dropout=self.last_dropout,
                colsample=self.colsample,
                l2_lambda=self.l2_lambda,
                attention_dim=self.attention_dim,
                anneal_steps=self.anneal_steps,
                min_temperature=self.min_temperature,
                num_features=num_features,
                num_outputs=num_outputs,
                task=task or self.task,
                add_last_linear=self.add_last_linear,
                gated=self.gated,
                seed=self.seed,
            )
        except ValidationError as e:
            raise ConfigError(f"invalid architecture: {_first_error(e)}") from e

    def to_train_config(self) -> TrainConfig:
        fields = TrainConfig.model_fields.keys()
        return TrainConfig(**{name: getattr(self, name) for name in fields})


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(part) for part in first["loc"])
    return f"{where}: {first['msg']}" if where else first["msg"]


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a flat YAML mapping.

    Raises:
        ConfigError: If the file is missing, not YAML or not a flat mapping
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file is not valid YAML: {e}") from e
    if not isinstance(raw, dict) or any(isinstance(v, (dict, list)) for v in raw.values()):
        raise ConfigError("config must be a flat key-value mapping", {"path": str(path)})
    return raw


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """`key=value` strings; values are parsed as YAML scalars."""
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value: {item!r}")
        overrides[key.strip()] = yaml.safe_load(value) if value.strip() else None
    return overrides


def resolve_preset(spec: str) -> Dict[str, Any]:
    """'name' or 'name:section' (e.g. 'wine:ga2m')."""
    name, _, key = spec.partition(":")
    try:
        return load_preset(name, key or None)
    except (FileNotFoundError, KeyError) as e:
        raise ConfigError(f"unknown preset {spec!r}: {e}") from e


def build_run_config(
    preset: Optional[str] = None,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge preset, config file and overrides over the defaults.

    Raises:
        ConfigError: On unknown keys, invalid values or inconsistent architecture
    """
    merged: Dict[str, Any] = {}
    if preset:
        merged.update(resolve_preset(preset))
    if config_path:
        merged.update(load_config_file(config_path))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        run = RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_first_error(e)}") from e
    run.to_model_config(num_features=1)
    logger.debug(f"Effective configuration: {run.model_dump(mode='json')}")
    return run


def dump_run_config(run: RunConfig) -> str:
    return yaml.safe_dump(run.model_dump(mode="json"), sort_keys=False)


def echo_run_config(run: RunConfig, path: Union[str, Path]) -> Path:
    """Write the effective configuration; the file is itself a valid --config."""
    return atomic_write_text(path, dump_run_config(run))
