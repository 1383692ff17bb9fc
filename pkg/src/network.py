"""
The NODE-GAM / NODE-GA2M model: stacked tree layers, gated dense connections,
optional low-rank attention, temperature annealing and the last linear layer.
"""
import math
from typing import List, Optional, Tuple

import torch
from loguru import logger
from torch import nn

from exceptions import InvalidArgumentError, InvalidStateError
from models import Arch, ForwardResult, ModelConfig, Prediction, Task
from numeric import dropout
from odt_layer import init_layer


def temperature(step: int, anneal_steps: int, min_temperature: float = 0.01) -> float:
    """
    Selection temperature after `step` optimisation steps.

    Decays geometrically from 1 at step 0 to `min_temperature` at step S
    (10^(-2 s / S) for the default 0.01) and is exactly 0 afterwards.
    """
    if step < 0 or anneal_steps < 0:
        raise InvalidArgumentError("steps must be non-negative", {"step": step, "anneal_steps": anneal_steps})
    if step == 0:
        return 1.0
    if step > anneal_steps:
        return 0.0
    return min_temperature ** (step / anneal_steps)


def output_bias_from_targets(targets: torch.Tensor, task: Task) -> float:
    """Class-prior log-odds for binary tasks, target mean for regression."""
    targets = torch.as_tensor(targets, dtype=torch.float64)
    if targets.numel() == 0:
        raise InvalidArgumentError("targets are empty", {"task": task.value})
    if task == Task.BINARY:
        p = float(targets.mean().clamp(1e-6, 1 - 1e-6))
        return math.log(p / (1 - p))
    return float(targets.mean())


class NodeGamModel(nn.Module):
    """
    L layers of GAM or GA2M trees followed by a linear read-out.

    The step counter is a buffer so the annealing schedule survives
    serialisation; everything else the forward pass needs lives in
    `config`, the parameters and the buffers.
    """

    def __init__(
        self,
        config: ModelConfig,
        output_bias: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.config = config
        if generator is None:
            generator = torch.Generator().manual_seed(config.seed)

        self.layers = nn.ModuleList([init_layer(config, generator) for _ in range(config.num_layers)])

        self.attention_b = nn.ParameterList()
        self.attention_c = nn.ParameterList()
        if config.arch == Arch.ATTENTION:
            scale = 1.0 / math.sqrt(config.attention_dim)
            for l in range(1, config.num_layers):
                prev = l * config.outputs_per_layer
                self.attention_b.append(nn.Parameter(
                    torch.randn(prev, config.attention_dim, generator=generator, dtype=torch.float64) * scale))
                self.attention_c.append(nn.Parameter(
                    torch.randn(config.attention_dim, config.trees_per_layer, generator=generator,
                                dtype=torch.float64) * scale))

        self.last_linear, self.bias = self._make_head(config.num_outputs, generator)
        self.register_buffer("output_bias", torch.full((config.num_outputs,), float(output_bias), dtype=torch.float64))
        self.register_buffer("step", torch.tensor(0, dtype=torch.int64))

    def _make_head(self, num_outputs: int, generator: torch.Generator) -> Tuple[nn.Parameter, nn.Parameter]:
        total = self.config.total_tree_outputs
        if self.config.add_last_linear:
            weight = torch.randn(total, num_outputs, generator=generator, dtype=torch.float64) / math.sqrt(total)
            return nn.Parameter(weight), nn.Parameter(torch.zeros(num_outputs, dtype=torch.float64))
        # Averaging read-out over the first channel of every tree.
        weight = torch.zeros(total, num_outputs, dtype=torch.float64)
        weight[:: self.config.tree_dim] = 1.0 / (self.config.num_layers * self.config.trees_per_layer)
        return (nn.Parameter(weight, requires_grad=False),
                nn.Parameter(torch.zeros(num_outputs, dtype=torch.float64), requires_grad=False))

    @property
    def current_temperature(self) -> float:
        return temperature(int(self.step), self.config.anneal_steps, self.config.min_temperature)

    @property
    def annealed(self) -> bool:
        """True once selections are exactly one-hot."""
        return self.current_temperature == 0.0

    def attention(self, layer_index: int) -> Optional[torch.Tensor]:
        """A = B C for layers after the first in attention mode."""
        if self.config.arch != Arch.ATTENTION or layer_index == 0:
            return None
        return self.attention_b[layer_index - 1] @ self.attention_c[layer_index - 1]

    def head_parameters(self) -> List[nn.Parameter]:
        return [self.last_linear, self.bias]

    def body_parameters(self) -> List[nn.Parameter]:
        head = {id(p) for p in self.head_parameters()}
        return [p for p in self.parameters() if id(p) not in head]

    def forward(
        self,
        x: torch.Tensor,
        training: bool = False,
        generator: Optional[torch.Generator] = None,
        temperature: Optional[float] = None,
    ) -> ForwardResult:
        """
        Run every layer and the read-out.

        Args:
            x: [batch, D] preprocessed inputs
            training: Enables dropout p1 on tree outputs and p2 on W_L
            generator: Random source for dropout
            temperature: Override for the step-derived temperature

        Returns:
            Response R = X_P W_L + w0 + output_bias and all tree outputs X_P
        """
        if x.dim() != 2 or x.shape[1] != self.config.num_features:
            raise InvalidArgumentError(
                "feature count mismatch",
                {"expected": self.config.num_features, "shape": tuple(x.shape)}
            )
        x = x.to(torch.float64)
        temp = self.current_temperature if temperature is None else temperature
        tree_dim = self.config.tree_dim

        prev_outputs: Optional[torch.Tensor] = None
        prev_selections: Optional[Tuple[torch.Tensor, ...]] = None
        for index, layer in enumerate(self.layers):
            result = layer(x, temp, prev_outputs, prev_selections, self.attention(index))
            h = dropout(result.outputs, self.config.output_dropout, training, generator)
            expanded = tuple(g.repeat_interleave(tree_dim, dim=0) for g in result.selections)
            if prev_outputs is None:
                prev_outputs, prev_selections = h, expanded
            else:
                prev_outputs = torch.cat([prev_outputs, h], dim=1)
                prev_selections = tuple(torch.cat([p, g], dim=0) for p, g in zip(prev_selections, expanded))

        weight = self.last_linear
        if self.config.add_last_linear:
            weight = dropout(weight, self.config.last_dropout, training, generator)
        response = prev_outputs @ weight + self.bias + self.output_bias
        return ForwardResult(response=response, tree_outputs=prev_outputs)

    @torch.no_grad()
    def reset_head(self, num_outputs: int, task: Task, output_bias: float = 0.0,
                   generator: Optional[torch.Generator] = None) -> None:
        """Replace W_L and w0 with freshly initialised ones (finetuning)."""
        self.config = self.config.model_copy(update={"num_outputs": num_outputs, "task": task})
        if generator is None:
            generator = torch.Generator().manual_seed(self.config.seed + 1)
        self.last_linear, self.bias = self._make_head(num_outputs, generator)
        self.output_bias = torch.full((num_outputs,), float(output_bias), dtype=torch.float64)
        logger.info(f"Re-initialised the read-out with {num_outputs} output(s) for {task.value}")


def forward(model: NodeGamModel, x: torch.Tensor, training: bool = False,
            generator: Optional[torch.Generator] = None) -> ForwardResult:
    return model(x, training=training, generator=generator)


@torch.no_grad()
def predict(model: NodeGamModel, x: torch.Tensor) -> Prediction:
    """Deterministic inference at the stored step's temperature, dropout off."""
    was_training = model.training
    model.eval()
    try:
        scores = model(torch.as_tensor(x, dtype=torch.float64), training=False).response
    finally:
        model.train(was_training)
    probabilities = torch.sigmoid(scores) if model.config.task == Task.BINARY else None
    return Prediction(scores=scores, probabilities=probabilities)


def dependency_report(model: NodeGamModel) -> List[List[Tuple[int, ...]]]:
    """
    Features each tree depends on, per layer.

    GAM trees map to a 1-tuple; GA2M trees to a sorted pair, possibly (j, j).

    Raises:
        InvalidStateError: If annealing has not completed
    """
    if not model.annealed:
        raise InvalidStateError(
            "training incomplete: selections are not one-hot yet",
            {"step": int(model.step), "anneal_steps": model.config.anneal_steps}
        )
    return [[tuple(sorted(features)) for features in layer.selected_features()] for layer in model.layers]


def tree_columns(model: NodeGamModel, layer_index: int, tree_index: int) -> slice:
    """Columns of X_P (and rows of W_L) holding one tree's output channels."""
    tree_dim = model.config.tree_dim
    start = layer_index * model.config.outputs_per_layer + tree_index * tree_dim
    return slice(start, start + tree_dim)
