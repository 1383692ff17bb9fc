"""
One layer of differentiable oblivious decision trees constrained to GAM or GA2M form.

A GAM tree softly picks one feature and splits it C times; a GA2M tree picks two
features and alternates between them across depth. Trees in later layers also
see the outputs of earlier trees, but only through gates that stay open between
trees on the same feature (GAM) or the same unordered feature pair (GA2M).
"""
import math
from typing import Optional, Sequence, Tuple

import torch
from loguru import logger
from torch import nn

from exceptions import InvalidArgumentError, InvalidStateError
from models import GamMode, LayerForwardResult, ModelConfig
from numeric import entmax15, entmoid15

# Gate mass below which the previous-output term is dropped.
GATE_EPS = 1e-12


def subsample_size(num_features: int, colsample: float) -> int:
    """Features each tree may use: max(ceil(D * eta), 1)."""
    if colsample <= 0:
        raise InvalidArgumentError("colsample must be > 0", {"colsample": colsample})
    return max(math.ceil(num_features * colsample), 1)


def choice(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Soft feature selection G = entmax15(F / T) along the last dimension.

    Args:
        logits: Feature logits; -inf marks excluded features
        temperature: T >= 0; T == 0 gives the exact one-hot argmax

    Returns:
        Selection probabilities, exactly 0 on excluded features

    Raises:
        InvalidStateError: If every logit of a row is -inf
    """
    if torch.isneginf(logits).all(dim=-1).any():
        raise InvalidStateError("every feature is excluded", {"shape": tuple(logits.shape)})
    return entmax15(logits, temperature)


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # [P, D] x ([D] or [I, D]) -> [P] or [P, I]
    return a @ (b.transpose(-1, -2) if b.dim() == 2 else b)


def gam_gate(prev_selection: torch.Tensor, selection: torch.Tensor) -> torch.Tensor:
    """g_p = <G_prev[p], G_i>; 1 at the annealed state iff both trees pick the same feature."""
    return _dot(prev_selection, selection)


def ga2m_gate(
    selection_1: torch.Tensor,
    selection_2: torch.Tensor,
    prev_selection_1: torch.Tensor,
    prev_selection_2: torch.Tensor,
) -> torch.Tensor:
    """Unordered-pair gate min((G1.G1p)(G2.G2p) + (G1.G2p)(G2.G1p), 1)."""
    same = _dot(prev_selection_1, selection_1) * _dot(prev_selection_2, selection_2)
    swapped = _dot(prev_selection_2, selection_1) * _dot(prev_selection_1, selection_2)
    return torch.clamp(same + swapped, max=1.0)


def previous_weights(gates: torch.Tensor, attention: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Normalised mixing weights over previous tree outputs.

    Args:
        gates: [P, I] gate values
        attention: [P, I] attention logits, or None for plain gating

    Returns:
        [P, I] weights; each column sums to 1, or is all zero when every gate is closed
    """
    open_mass = gates.sum(dim=0, keepdim=True)
    has_open = open_mass >= GATE_EPS
    if attention is None:
        weights = gates / torch.where(has_open, open_mass, torch.ones_like(open_mass))
    else:
        closed = gates <= 0
        safe_log = torch.log(torch.where(closed, torch.ones_like(gates), gates))
        logits = torch.where(closed, torch.full_like(gates, -math.inf), safe_log + attention)
        # entmax over P for each tree; columns with every gate closed are masked below
        logits = torch.where(has_open, logits, torch.zeros_like(logits))
        mixed = gates * entmax15(logits.transpose(0, 1), 1.0).transpose(0, 1)
        mass = mixed.sum(dim=0, keepdim=True)
        weights = mixed / torch.where(mass > 0, mass, torch.ones_like(mass))
    return torch.where(has_open, weights, torch.zeros_like(weights))


def leaf_weights(soft_bits: torch.Tensor) -> torch.Tensor:
    """
    Outer product over depth of [H_c, 1 - H_c].

    Args:
        soft_bits: [batch, I, C] entmoid outputs

    Returns:
        [batch, I, 2^C] leaf probabilities; depth 1 is the most significant bit
    """
    batch, trees, depth = soft_bits.shape
    e = torch.ones(batch, trees, 1, dtype=soft_bits.dtype, device=soft_bits.device)
    for c in range(depth):
        h = soft_bits[..., c]
        pair = torch.stack([h, 1 - h], dim=-1)
        e = (e.unsqueeze(-1) * pair.unsqueeze(-2)).reshape(batch, trees, -1)
    return e


class GamTreeLayer(nn.Module):
    """
    I oblivious trees sharing one layer.

    Parameters
    ----------
    feature_logits : [selectors, I, D]
        F (GAM, one selector) or F1/F2 (GA2M, two selectors)
    thresholds : [I, C]
    log_slopes : [I, C]
        log of the strictly positive split slopes
    responses : [I, tree_dim, 2^C]
        Leaf values W

    Buffers
    -------
    subsample_mask : [I, D] bool
        Features a tree may select; shared by both GA2M selectors
    initialized : bool
        Whether data-aware threshold initialisation has run (first forward in training mode)
    init_seed : int
        Seed for the data-aware initialisation
    """

    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.mode = config.mode
        self.num_trees = config.trees_per_layer
        self.depth = config.depth
        self.tree_dim = config.tree_dim
        self.num_features = config.num_features
        self.gated = config.gated

        trees, depth, features = self.num_trees, self.depth, self.num_features
        kwargs = dict(generator=generator, dtype=torch.float64)

        self.feature_logits = nn.Parameter(torch.randn(config.num_selectors, trees, features, **kwargs))
        self.thresholds = nn.Parameter(torch.zeros(trees, depth, dtype=torch.float64))
        self.log_slopes = nn.Parameter(torch.zeros(trees, depth, dtype=torch.float64))
        self.responses = nn.Parameter(
            torch.randn(trees, self.tree_dim, 2 ** depth, **kwargs) / math.sqrt(2 ** depth)
        )

        keep = subsample_size(features, config.colsample)
        mask = torch.zeros(trees, features, dtype=torch.bool)
        for i in range(trees):
            mask[i, torch.randperm(features, generator=generator)[:keep]] = True
        self.register_buffer("subsample_mask", mask)
        self.register_buffer("initialized", torch.tensor(False))
        seed = int(torch.randint(0, 2 ** 62, (1,), generator=generator).item())
        self.register_buffer("init_seed", torch.tensor(seed, dtype=torch.int64))

    @property
    def slopes(self) -> torch.Tensor:
        return self.log_slopes.exp()

    def masked_logits(self) -> torch.Tensor:
        """Feature logits with excluded features set to -inf."""
        return self.feature_logits.masked_fill(~self.subsample_mask, -math.inf)

    def selections(self, temperature: float) -> Tuple[torch.Tensor, ...]:
        """One [I, D] selection matrix per selector."""
        return tuple(choice(logits, temperature) for logits in self.masked_logits())

    def selected_features(self) -> list[tuple[int, ...]]:
        """Hard feature choice per tree (argmax of the masked logits)."""
        picks = self.masked_logits().argmax(dim=-1)  # [selectors, I]
        return [tuple(int(j) for j in picks[:, i]) for i in range(self.num_trees)]

    @torch.no_grad()
    def initialize_thresholds(self, split_inputs: torch.Tensor) -> None:
        """Set each threshold to a random quantile of its node's split input K over the batch."""
        generator = torch.Generator().manual_seed(int(self.init_seed))
        batch = split_inputs.shape[0]
        quantiles = torch.rand(self.num_trees, self.depth, generator=generator, dtype=torch.float64)
        index = (quantiles * (batch - 1)).round().long()
        ordered, _ = torch.sort(split_inputs, dim=0)
        self.thresholds.copy_(ordered.gather(0, index.unsqueeze(0)).squeeze(0))
        self.initialized.fill_(True)
        logger.debug(f"Initialised thresholds of {self.num_trees} trees from a batch of {batch}")

    def forward(
        self,
        x: torch.Tensor,
        temperature: float,
        prev_outputs: Optional[torch.Tensor] = None,
        prev_selections: Optional[Sequence[torch.Tensor]] = None,
        attention: Optional[torch.Tensor] = None,
    ) -> LayerForwardResult:
        if self.mode == GamMode.GAM:
            return tree_forward_gam(x, prev_outputs, prev_selections, attention, temperature, self)
        return tree_forward_ga2m(x, prev_outputs, prev_selections, attention, temperature, self)


def _check_inputs(x, prev_outputs, prev_selections, attention, layer: GamTreeLayer, selectors: int) -> None:
    if x.dim() != 2 or x.shape[1] != layer.num_features:
        raise InvalidArgumentError(
            "input columns must match the number of features",
            {"expected": layer.num_features, "shape": tuple(x.shape)}
        )
    if prev_outputs is None:
        return
    if prev_selections is None or len(prev_selections) != selectors:
        raise InvalidArgumentError("previous selections must accompany previous outputs", {"selectors": selectors})
    width = prev_outputs.shape[1]
    for selection in prev_selections:
        if selection.shape != (width, layer.num_features):
            raise InvalidArgumentError(
                "previous selections must align with previous outputs",
                {"outputs": width, "selection": tuple(selection.shape)}
            )
    if attention is not None and attention.shape != (width, layer.num_trees):
        raise InvalidArgumentError(
            "attention logits must be [previous outputs, trees]",
            {"expected": (width, layer.num_trees), "shape": tuple(attention.shape)}
        )


def _previous_term(prev_outputs, gates, attention) -> torch.Tensor:
    # [batch, P] x [P, I] -> [batch, I]
    return prev_outputs @ previous_weights(gates, attention)


def _respond(layer: GamTreeLayer, split_inputs: torch.Tensor) -> torch.Tensor:
    if layer.training and not bool(layer.initialized):
        layer.initialize_thresholds(split_inputs.detach())
    soft_bits = entmoid15((split_inputs - layer.thresholds) / layer.slopes)
    e = leaf_weights(soft_bits)
    h = torch.einsum("bil,iol->bio", e, layer.responses)
    return h.reshape(h.shape[0], -1)


def tree_forward_gam(
    x: torch.Tensor,
    prev_outputs: Optional[torch.Tensor],
    prev_selections: Optional[Sequence[torch.Tensor]],
    attention: Optional[torch.Tensor],
    temperature: float,
    layer: GamTreeLayer,
) -> LayerForwardResult:
    """
    GAM trees: every depth splits the same softly chosen feature.

    Args:
        x: [batch, D] inputs
        prev_outputs: [batch, P] outputs of earlier layers, or None
        prev_selections: (G_prev,) with G_prev [P, D], one row per previous output column
        attention: [P, I] attention logits or None
        temperature: Selection temperature
        layer: The layer parameters

    Returns:
        Tree outputs [batch, I * tree_dim] and the selection (G,)
    """
    _check_inputs(x, prev_outputs, prev_selections, attention, layer, 1)
    (selection,) = layer.selections(temperature)
    k = x @ selection.T  # [batch, I]
    if prev_outputs is not None:
        gates = gam_gate(prev_selections[0], selection) if layer.gated else torch.ones(
            prev_outputs.shape[1], layer.num_trees, dtype=x.dtype)
        k = k + _previous_term(prev_outputs, gates, attention)
    split_inputs = k.unsqueeze(-1).expand(-1, -1, layer.depth)
    return LayerForwardResult(outputs=_respond(layer, split_inputs), selections=(selection,))


def tree_forward_ga2m(
    x: torch.Tensor,
    prev_outputs: Optional[torch.Tensor],
    prev_selections: Optional[Sequence[torch.Tensor]],
    attention: Optional[torch.Tensor],
    temperature: float,
    layer: GamTreeLayer,
) -> LayerForwardResult:
    """
    GA2M trees: two soft feature choices, alternating K1, K2, K1, ... across depth.

    Both split inputs receive the same gated previous-output term.
    """
    _check_inputs(x, prev_outputs, prev_selections, attention, layer, 2)
    selection_1, selection_2 = layer.selections(temperature)
    k1 = x @ selection_1.T
    k2 = x @ selection_2.T
    if prev_outputs is not None:
        if layer.gated:
            gates = ga2m_gate(selection_1, selection_2, prev_selections[0], prev_selections[1])
        else:
            gates = torch.ones(prev_outputs.shape[1], layer.num_trees, dtype=x.dtype)
        term = _previous_term(prev_outputs, gates, attention)
        k1 = k1 + term
        k2 = k2 + term
    split_inputs = torch.stack([k1 if c % 2 == 0 else k2 for c in range(layer.depth)], dim=-1)
    return LayerForwardResult(outputs=_respond(layer, split_inputs), selections=(selection_1, selection_2))


def init_layer(config: ModelConfig, generator: Optional[torch.Generator] = None) -> GamTreeLayer:
    """Build a layer; subsample masks are drawn here once and persisted as buffers."""
    return GamTreeLayer(config, generator)
