"""
Training loop shared by supervised training, masked-reconstruction pretraining
and finetuning.

Schedule: linear warmup, x decay_factor on every plateau, early stopping after
`early_stop_steps` steps without validation improvement, wall-clock budget,
and the final parameters averaged over the last `checkpoint_count` snapshots.
"""
import json
import time
from collections import deque
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics import roc_auc_score

from exceptions import InvalidArgumentError, NumericalError
from models import HistoryRecord, Task, TrainConfig, TrainResult
from network import NodeGamModel, output_bias_from_targets
from optimizer import QHAdam
from utils.atomic import atomic_write_text


class TrainState(BaseModel):
    """Mutable bookkeeping of one run. Steps count from the start of the run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    best_metric: Optional[float] = Field(default=None, description="Best validation metric so far")
    best_step: int = Field(default=0, description="Run step of the last improvement")
    last_decay_step: int = Field(default=0, description="Run step of the last learning-rate decay")
    num_decays: int = Field(default=0, description="Plateau decays applied so far")
    snapshots: Any = Field(default_factory=deque, description="Bounded deque of recent state dicts")
    start_time: float = Field(default_factory=time.monotonic)

    def steps_since_improvement(self, step: int) -> int:
        return step - self.best_step


def loss(
    response: torch.Tensor,
    targets: torch.Tensor,
    tree_outputs: torch.Tensor,
    l2_lambda: float,
    task: Task,
) -> torch.Tensor:
    """
    Mean BCE-on-logits (binary) or MSE (regression) plus l2_lambda * mean(X_P^2).

    Raises:
        InvalidArgumentError: On shape mismatch or binary targets outside {0, 1}
    """
    targets = torch.as_tensor(targets)
    if targets.numel() != response.numel():
        raise InvalidArgumentError(
            "targets do not match the response",
            {"response": tuple(response.shape), "targets": tuple(targets.shape)}
        )
    if targets.dtype == torch.bool:
        raise InvalidArgumentError("targets must be numeric", {"dtype": str(targets.dtype)})
    targets = targets.reshape(response.shape).to(response.dtype)
    if task == Task.BINARY:
        if not ((targets == 0) | (targets == 1)).all():
            raise InvalidArgumentError("binary targets must be 0 or 1")
        data_loss = F.binary_cross_entropy_with_logits(response, targets)
    else:
        data_loss = F.mse_loss(response, targets)
    return data_loss + l2_lambda * tree_outputs.pow(2).mean()


def masked_reconstruction_loss(
    response: torch.Tensor,
    original: torch.Tensor,
    mask: torch.Tensor,
    tree_outputs: torch.Tensor,
    l2_lambda: float,
) -> torch.Tensor:
    """MSE over masked cells only, plus the tree-output penalty."""
    squared = (response - original).pow(2) * mask
    return squared.sum() / mask.sum().clamp(min=1) + l2_lambda * tree_outputs.pow(2).mean()


def draw_mask(shape: Tuple[int, ...], rate: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Independent Bernoulli(rate) cell mask."""
    return torch.rand(shape, generator=generator, dtype=torch.float64) < rate


def lr_schedule(step: int, state: TrainState, config: TrainConfig) -> float:
    """Learning rate for 1-based run step `step`."""
    warmup = min(1.0, step / config.warmup_steps) if config.warmup_steps > 0 else 1.0
    return config.lr * warmup * config.plateau_decay_factor ** state.num_decays


def average_checkpoints(snapshots: Deque[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    """
    Element-wise mean of floating tensors across snapshots.

    Written as base + sum(s - base) / k so identical snapshots average to
    themselves bit-exactly. Non-floating buffers come from the latest snapshot.
    """
    if not snapshots:
        raise InvalidArgumentError("no snapshots to average")
    base, latest, k = snapshots[0], snapshots[-1], len(snapshots)
    averaged = {}
    for name, value in latest.items():
        if not value.is_floating_point():
            averaged[name] = value.clone()
            continue
        total = torch.zeros_like(base[name])
        for snapshot in snapshots:
            total += snapshot[name] - base[name]
        averaged[name] = base[name] + total / k
    return averaged


def configure_determinism(deterministic: bool) -> None:
    torch.use_deterministic_algorithms(deterministic)


@torch.no_grad()
def _batched_response(model: NodeGamModel, x: torch.Tensor, batch_size: int) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        parts = [model(x[i:i + batch_size], training=False).response for i in range(0, x.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(parts, dim=0)


class SupervisedObjective:
    """BCE/MSE loss; validation AUC (higher is better) or RMSE (lower is better)."""

    def __init__(self, task: Task, l2_lambda: float):
        self.task = task
        self.l2_lambda = l2_lambda
        self.higher_is_better = task == Task.BINARY
        self.metric_name = "auc" if task == Task.BINARY else "rmse"

    def batch_loss(self, model: NodeGamModel, x: torch.Tensor, y: torch.Tensor,
                   generator: torch.Generator) -> torch.Tensor:
        result = model(x, training=True, generator=generator)
        return loss(result.response, y, result.tree_outputs, self.l2_lambda, self.task)

    def evaluate(self, model: NodeGamModel, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> Optional[float]:
        scores = _batched_response(model, x, batch_size)[:, 0].numpy()
        targets = y.reshape(-1).numpy()
        if self.task == Task.BINARY:
            try:
                return float(roc_auc_score(targets, scores))
            except ValueError as e:
                logger.warning(f"Validation AUC undefined: {e}")
                return None
        return float(np.sqrt(np.mean((scores - targets) ** 2)))


class ReconstructionObjective:
    """Masked-cell reconstruction; validation masks are fixed so metrics are comparable."""

    higher_is_better = False
    metric_name = "masked_mse"

    def __init__(self, mask_rate: float, l2_lambda: float, seed: int):
        self.mask_rate = mask_rate
        self.l2_lambda = l2_lambda
        self.seed = seed

    def batch_loss(self, model: NodeGamModel, x: torch.Tensor, y: Optional[torch.Tensor],
                   generator: torch.Generator) -> torch.Tensor:
        mask = draw_mask(tuple(x.shape), self.mask_rate, generator)
        result = model(x.masked_fill(mask, 0.0), training=True, generator=generator)
        return masked_reconstruction_loss(result.response, x, mask.to(x.dtype), result.tree_outputs, self.l2_lambda)

    def evaluate(self, model: NodeGamModel, x: torch.Tensor, y: Optional[torch.Tensor],
                 batch_size: int) -> Optional[float]:
        generator = torch.Generator().manual_seed(self.seed + 1)
        mask = draw_mask(tuple(x.shape), self.mask_rate, generator)
        if not mask.any():
            return None
        response = _batched_response(model, x.masked_fill(mask, 0.0), batch_size)
        return float(((response - x).pow(2) * mask).sum() / mask.sum())


def _improved(metric: float, best: Optional[float], higher_is_better: bool) -> bool:
    if best is None:
        return True
    return metric > best if higher_is_better else metric < best


def _set_body_trainable(model: NodeGamModel, trainable: bool) -> None:
    for p in model.body_parameters():
        p.requires_grad_(trainable)


def _fit(
    model: NodeGamModel,
    objective,
    x_train: torch.Tensor,
    y_train: Optional[torch.Tensor],
    x_val: Optional[torch.Tensor],
    y_val: Optional[torch.Tensor],
    config: TrainConfig,
    freeze_steps: int = 0,
) -> TrainResult:
    n = x_train.shape[0]
    if n == 0:
        raise InvalidArgumentError("training data is empty")
    if y_train is not None and y_train.shape[0] != n:
        raise InvalidArgumentError("features and targets differ in length", {"x": n, "y": y_train.shape[0]})
    has_val = x_val is not None and x_val.shape[0] > 0

    configure_determinism(config.deterministic)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = QHAdam(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.lr,
        nus=(config.qh_nu1, config.qh_nu2),
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )
    state = TrainState(snapshots=deque(maxlen=config.checkpoint_count))
    history: List[HistoryRecord] = []
    if freeze_steps > 0:
        _set_body_trainable(model, False)
        logger.info(f"Body frozen for the first {freeze_steps} steps")

    model.train()
    run_step, running_loss, running_count = 0, 0.0, 0
    stop_reason = None
    try:
        while stop_reason is None:
            order = torch.randperm(n, generator=generator)
            for start in range(0, n, config.batch_size):
                run_step += 1
                if freeze_steps > 0 and run_step == freeze_steps + 1:
                    _set_body_trainable(model, True)
                    logger.info(f"Unfroze the body at run step {run_step}")

                index = order[start:start + config.batch_size]
                xb = x_train[index]
                yb = y_train[index] if y_train is not None else None

                lr = lr_schedule(run_step, state, config)
                optimizer.set_lr(lr)
                temperature = model.current_temperature
                optimizer.zero_grad(set_to_none=True)
                batch_loss = objective.batch_loss(model, xb, yb, generator)
                if not torch.isfinite(batch_loss):
                    raise NumericalError("non-finite training loss", {"step": int(model.step) + 1})
                if batch_loss.requires_grad:
                    batch_loss.backward()
                    optimizer.step()
                model.step += 1
                running_loss += batch_loss.item()
                running_count += 1

                if run_step % config.checkpoint_interval == 0:
                    state.snapshots.append({k: v.detach().clone() for k, v in model.state_dict().items()})

                if run_step % config.eval_interval_steps == 0:
                    metric = objective.evaluate(model, x_val, y_val, config.batch_size) if has_val else None
                    record = HistoryRecord(
                        step=int(model.step),
                        train_loss=running_loss / max(running_count, 1),
                        val_metric=metric,
                        lr=lr,
                        temperature=temperature,
                    )
                    history.append(record)
                    running_loss, running_count = 0.0, 0
                    if metric is not None and _improved(metric, state.best_metric, objective.higher_is_better):
                        state.best_metric, state.best_step = metric, run_step
                    logger.info(
                        f"step {record.step}: loss={record.train_loss:.5f} "
                        f"{objective.metric_name}={metric} lr={lr:.2e} T={temperature:.4f}"
                    )

                if has_val and state.steps_since_improvement(run_step) >= config.early_stop_steps:
                    stop_reason = "early_stop"
                elif config.max_steps is not None and run_step >= config.max_steps:
                    stop_reason = "max_steps"
                elif (time.monotonic() - state.start_time) / 3600.0 >= config.max_train_hours:
                    stop_reason = "time_budget"
                    logger.warning(f"Time budget of {config.max_train_hours}h reached")
                if stop_reason is not None:
                    break

                if has_val and run_step - max(state.best_step, state.last_decay_step) >= config.plateau_patience_steps:
                    state.num_decays += 1
                    state.last_decay_step = run_step
                    logger.warning(
                        f"No improvement for {config.plateau_patience_steps} steps; "
                        f"lr decayed to {lr_schedule(run_step, state, config):.2e}"
                    )
    finally:
        if freeze_steps > 0:
            _set_body_trainable(model, True)

    if state.snapshots:
        live = {k: v.detach().clone() for k, v in model.state_dict().items() if not v.is_floating_point()}
        averaged = average_checkpoints(state.snapshots)
        averaged.update(live)
        model.load_state_dict(averaged)
        logger.info(f"Averaged the last {len(state.snapshots)} checkpoints at step {int(model.step)}")
    model.eval()
    logger.info(f"Training stopped ({stop_reason}) after {run_step} steps; best metric {state.best_metric}")
    return TrainResult(model=model, history=history, best_metric=state.best_metric, stop_reason=stop_reason)


def _as_tensor(values) -> Optional[torch.Tensor]:
    if values is None:
        return None
    return torch.as_tensor(np.asarray(values), dtype=torch.float64)


def train(
    model: NodeGamModel,
    x_train,
    y_train,
    x_val=None,
    y_val=None,
    config: Optional[TrainConfig] = None,
) -> TrainResult:
    """
    Supervised training.

    Raises:
        InvalidArgumentError: On empty data or mismatched lengths
        NumericalError: On a non-finite loss or gradient
    """
    config = config or TrainConfig()
    if y_train is None:
        raise InvalidArgumentError("supervised training needs targets")
    objective = SupervisedObjective(model.config.task, model.config.l2_lambda)
    logger.info(f"Training {model.config.mode.value} model ({model.config.task.value}) on {len(x_train)} rows")
    return _fit(model, objective, _as_tensor(x_train), _as_tensor(y_train).reshape(-1, 1),
                _as_tensor(x_val), _as_tensor(y_val).reshape(-1, 1) if y_val is not None else None, config)


def pretrain(model: NodeGamModel, x_train, x_val=None, config: Optional[TrainConfig] = None) -> TrainResult:
    """
    Masked-reconstruction pretraining: one head per input feature.

    Raises:
        InvalidArgumentError: If the model does not have one learned head per feature
    """
    config = config or TrainConfig()
    mc = model.config
    if mc.num_outputs != mc.num_features or not mc.add_last_linear:
        raise InvalidArgumentError(
            "pretraining needs one learned output head per feature",
            {"num_outputs": mc.num_outputs, "num_features": mc.num_features, "add_last_linear": mc.add_last_linear}
        )
    objective = ReconstructionObjective(config.mask_rate, mc.l2_lambda, config.seed)
    logger.info(f"Pretraining on {len(x_train)} rows with mask rate {config.mask_rate}")
    return _fit(model, objective, _as_tensor(x_train), None, _as_tensor(x_val), None, config)


def finetune(
    model: NodeGamModel,
    x_train,
    y_train,
    x_val=None,
    y_val=None,
    config: Optional[TrainConfig] = None,
    task: Task = Task.REGRESSION,
) -> TrainResult:
    """
    Replace the read-out with a single fresh head, train it alone for
    `freeze_steps` steps, then train everything. The step counter carries over.

    Raises:
        InvalidArgumentError: If no labels are given
    """
    config = config or TrainConfig()
    if y_train is None or len(y_train) == 0:
        raise InvalidArgumentError("finetuning needs labelled data")
    y = _as_tensor(y_train).reshape(-1, 1)
    generator = torch.Generator().manual_seed(config.seed)
    model.reset_head(1, task, output_bias_from_targets(y, task), generator)
    objective = SupervisedObjective(task, model.config.l2_lambda)
    logger.info(f"Finetuning from step {int(model.step)} on {len(y)} labelled rows")
    return _fit(model, objective, _as_tensor(x_train), y,
                _as_tensor(x_val), _as_tensor(y_val).reshape(-1, 1) if y_val is not None else None,
                config, freeze_steps=config.freeze_steps)


def labeled_subset(x, y, fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Random subset of max(1, round(n * fraction)) labelled rows, kept in original order."""
    x, y = np.asarray(x), np.asarray(y)
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError("fraction must be in (0, 1]", {"fraction": fraction})
    n = x.shape[0]
    keep = max(1, int(round(n * fraction)))
    index = np.sort(np.random.default_rng(seed).permutation(n)[:keep])
    return x[index], y[index]


def write_history(path: Union[str, Path], history: List[HistoryRecord]) -> Path:
    """History as JSON lines, one record per evaluation."""
    text = "".join(json.dumps(record.model_dump()) + "\n" for record in history)
    return atomic_write_text(path, text)


def read_history(path: Union[str, Path]) -> List[HistoryRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return [HistoryRecord.model_validate_json(line) for line in f if line.strip()]
