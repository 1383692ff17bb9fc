import os
import sys

import numpy as np
import pandas as pd
import pytest
import torch
import yaml

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from models import Arch, GamMode, ModelConfig, Task, TrainConfig
from network import NodeGamModel
from training import train


@pytest.fixture
def make_config():
    """Factory for small model configs; keyword arguments override the defaults."""
    def factory(**overrides):
        params = dict(
            mode=GamMode.GAM,
            arch=Arch.PLAIN,
            attention_dim=0,
            num_layers=2,
            trees_per_layer=4,
            depth=2,
            colsample=1.0,
            last_dropout=0.0,
            anneal_steps=4,
            num_features=3,
            seed=0,
        )
        params.update(overrides)
        return ModelConfig(**params)
    return factory


@pytest.fixture
def fast_train_config():
    """Eight steps: enough to anneal a model with anneal_steps=4."""
    return TrainConfig(
        lr=0.01,
        batch_size=64,
        warmup_steps=0,
        eval_interval_steps=4,
        checkpoint_count=2,
        max_steps=8,
        seed=0,
    )


@pytest.fixture
def regression_arrays():
    """Model-unit inputs with an additive target plus one pairwise term."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(256, 3))
    y = np.sin(x[:, 0]) + 0.5 * x[:, 1] ** 2 + 0.3 * x[:, 0] * x[:, 2]
    return x, y


@pytest.fixture
def binary_arrays():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(256, 3))
    y = (x[:, 0] + 0.5 * x[:, 1] + 0.1 * rng.normal(size=256) > 0).astype(np.float64)
    return x, y


@pytest.fixture
def annealed_gam_model(make_config, fast_train_config, regression_arrays):
    """A small GAM trained past its annealing horizon."""
    x, y = regression_arrays
    model = NodeGamModel(make_config(), output_bias=float(y.mean()))
    return train(model, x, y, config=fast_train_config).model


@pytest.fixture
def annealed_ga2m_model(make_config, fast_train_config, regression_arrays):
    """A small GA2M (with attention) trained past its annealing horizon."""
    x, y = regression_arrays
    config = make_config(mode=GamMode.GA2M, arch=Arch.ATTENTION, attention_dim=4, trees_per_layer=6)
    model = NodeGamModel(config, output_bias=float(y.mean()))
    return train(model, x, y, config=fast_train_config).model


@pytest.fixture
def sample_frame():
    """Raw tabular data: two numeric columns (one with gaps), one categorical, binary target."""
    rng = np.random.default_rng(3)
    n = 200
    age = rng.uniform(20, 70, size=n)
    income = rng.lognormal(10, 0.5, size=n)
    income[::17] = np.nan
    city = rng.choice(["paris", "rome", "oslo"], size=n)
    logit = 0.08 * (age - 45) + np.where(city == "rome", 1.0, -0.5)
    label = (logit + rng.normal(scale=0.5, size=n) > 0).astype(int)
    return pd.DataFrame({"age": age, "income": income, "city": city, "label": label})


@pytest.fixture
def sample_schema_dict():
    return {"age": "numeric", "income": "numeric", "city": "categorical", "label": "target"}


@pytest.fixture
def sample_files(tmp_path, sample_frame, sample_schema_dict):
    """CSV + schema on disk; returns (csv_path, schema_path)."""
    csv_path = tmp_path / "train.csv"
    schema_path = tmp_path / "schema.yaml"
    sample_frame.to_csv(csv_path, index=False)
    schema_path.write_text(yaml.safe_dump(sample_schema_dict), encoding="utf-8")
    return csv_path, schema_path


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_overrides():
    """RunConfig keys for a model that trains and anneals in a few steps."""
    return {
        "arch": "plain",
        "attention_dim": 0,
        "num_layers": 1,
        "trees_per_layer": 4,
        "depth": 2,
        "colsample": 1.0,
        "last_dropout": 0.0,
        "anneal_steps": 4,
        "batch_size": 64,
        "warmup_steps": 0,
        "eval_interval_steps": 4,
        "checkpoint_count": 2,
        "max_steps": 8,
        "freeze_steps": 2,
    }
