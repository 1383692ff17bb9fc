from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator


class GamMode(str, Enum):
    """Additive structure enforced by the trees."""
    GAM = "gam"
    GA2M = "ga2m"


class Arch(str, Enum):
    """How a tree mixes the gated outputs of earlier layers."""
    PLAIN = "plain"
    ATTENTION = "attention"


class Task(str, Enum):
    """Supervised task type."""
    BINARY = "binary"
    REGRESSION = "regression"


class ModelConfig(BaseModel):
    """Architecture hyperparameters of a NODE-GAM / NODE-GA2M model."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: GamMode = Field(default=GamMode.GAM, description="GAM (1 feature per tree) or GA2M (at most 2)")
    arch: Arch = Field(default=Arch.ATTENTION, description="Plain gating or low-rank attention over gated trees")
    num_layers: int = Field(default=3, ge=1, description="Number of tree layers L")
    trees_per_layer: int = Field(default=666, ge=1, description="Trees per layer I")
    depth: int = Field(default=4, ge=1, description="Tree depth C")
    addi_tree_dim: int = Field(default=0, ge=0, description="Extra output channels per tree")
    output_dropout: float = Field(default=0.0, ge=0.0, lt=1.0, description="Dropout p1 on tree outputs")
    last_dropout: float = Field(default=0.5, ge=0.0, lt=1.0, description="Dropout p2 on the last linear weights")
    colsample: float = Field(default=0.1, gt=0.0, le=1.0, description="Column subsample ratio eta per tree")
    l2_lambda: float = Field(default=1e-5, ge=0.0, description="l2 penalty on tree outputs")
    attention_dim: int = Field(default=16, ge=0, description="Attention embedding dimension E")
    anneal_steps: int = Field(default=4000, ge=0, description="Temperature annealing steps S")
    min_temperature: float = Field(default=0.01, gt=0.0, lt=1.0, description="Temperature reached at step S")
    num_features: int = Field(..., ge=1, description="Number of input features D")
    num_outputs: int = Field(default=1, ge=1, description="Output heads (D when pretraining)")
    task: Task = Field(default=Task.REGRESSION, description="Supervised task type")
    add_last_linear: bool = Field(default=True, description="Learn W_L instead of averaging tree outputs")
    gated: bool = Field(default=True, description="Gate inter-layer connections; false opens every gate (debug)")
    seed: int = Field(default=0, description="Seed for parameter initialisation and subsample masks")

    @model_validator(mode="after")
    def check_architecture(self) -> "ModelConfig":
        if self.mode == GamMode.GA2M and self.depth < 2:
            raise ValueError("GA2M trees need depth >= 2")
        if (self.arch == Arch.ATTENTION) != (self.attention_dim > 0):
            raise ValueError("attention_dim must be > 0 exactly when arch is attention")
        if not self.add_last_linear and self.num_outputs != 1:
            raise ValueError("multiple output heads require add_last_linear")
        return self

    @property
    def tree_dim(self) -> int:
        return 1 + self.addi_tree_dim

    @property
    def num_selectors(self) -> int:
        return 1 if self.mode == GamMode.GAM else 2

    @property
    def outputs_per_layer(self) -> int:
        return self.trees_per_layer * self.tree_dim

    @property
    def total_tree_outputs(self) -> int:
        return self.num_layers * self.outputs_per_layer


class TrainConfig(BaseModel):
    """Optimisation schedule for supervised training, pretraining and finetuning."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(default=0.01, ge=0.0, description="Base learning rate")
    batch_size: int = Field(default=2048, ge=1, description="Mini-batch size")
    warmup_steps: int = Field(default=500, ge=0, description="Linear learning-rate warmup steps")
    plateau_patience_steps: int = Field(default=5000, ge=1, description="Steps without improvement before lr decay")
    plateau_decay_factor: float = Field(default=0.2, gt=0.0, lt=1.0, description="Multiplicative lr decay")
    early_stop_steps: int = Field(default=11000, ge=1, description="Steps without improvement before stopping")
    checkpoint_count: int = Field(default=5, ge=1, description="Snapshots averaged at the end of training")
    checkpoint_interval_steps: Optional[int] = Field(default=None, ge=1, description="Defaults to eval_interval_steps")
    eval_interval_steps: int = Field(default=200, ge=1, description="Validation frequency")
    max_train_hours: float = Field(default=20.0, gt=0.0, description="Wall-clock budget")
    max_steps: Optional[int] = Field(default=None, ge=0, description="Hard cap on optimisation steps")
    seed: int = Field(default=0, description="Seed for batching, dropout and masks")
    mask_rate: float = Field(default=0.15, ge=0.0, lt=1.0, description="Cell masking probability when pretraining")
    freeze_steps: int = Field(default=500, ge=0, description="Head-only steps at the start of finetuning")
    qh_nu1: float = Field(default=0.7, ge=0.0, le=1.0, description="QHAdam immediate discount for the first moment")
    qh_nu2: float = Field(default=1.0, ge=0.0, le=1.0, description="QHAdam immediate discount for the second moment")
    beta1: float = Field(default=0.95, ge=0.0, lt=1.0, description="First moment decay")
    beta2: float = Field(default=0.998, ge=0.0, lt=1.0, description="Second moment decay")
    eps: float = Field(default=1e-8, gt=0.0, description="Denominator epsilon")
    deterministic: bool = Field(default=True, description="Use deterministic torch algorithms")

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_interval_steps or self.eval_interval_steps


class HistoryRecord(BaseModel):
    """One evaluation point of a training run."""
    step: int = Field(..., description="Optimisation steps completed by the model")
    train_loss: float = Field(..., description="Mean training loss since the previous record")
    val_metric: Optional[float] = Field(default=None, description="Validation metric (AUC, RMSE or masked MSE)")
    lr: float = Field(..., description="Learning rate used at this step")
    temperature: float = Field(..., description="Selection temperature at this step")


class LayerForwardResult(BaseModel):
    """Tree responses of one layer and the feature selections that produced them."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    outputs: torch.Tensor = Field(..., description="[batch, I * tree_dim] tree responses")
    selections: Tuple[torch.Tensor, ...] = Field(..., description="One [I, D] selection per selector (1 for GAM, 2 for GA2M)")


class ForwardResult(BaseModel):
    """Model response together with every tree output it was built from."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    response: torch.Tensor = Field(..., description="[batch, num_outputs] model response R")
    tree_outputs: torch.Tensor = Field(..., description="[batch, L * I * tree_dim] all tree outputs X_P")


class Prediction(BaseModel):
    """Inference output for a batch of rows."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scores: torch.Tensor = Field(..., description="[batch, num_outputs] raw scores")
    probabilities: Optional[torch.Tensor] = Field(default=None, description="sigmoid(scores) for binary tasks")


class TrainResult(BaseModel):
    """Trained model plus its evaluation history."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: Any = Field(..., description="The trained NodeGamModel")
    history: List[HistoryRecord] = Field(default_factory=list, description="Evaluation records in step order")
    best_metric: Optional[float] = Field(default=None, description="Best validation metric seen")
    stop_reason: str = Field(default="max_steps", description="early_stop, time_budget or max_steps")


class ShapeFunction(BaseModel):
    """Centered main effect f_j on a sorted grid."""
    feature_index: int = Field(..., description="Column index j")
    feature_name: str = Field(..., description="Column name")
    grid: List[float] = Field(..., description="Sorted grid points")
    edges: List[float] = Field(default_factory=list, description="Bin boundaries between consecutive grid points")
    values: List[float] = Field(..., description="f_j at each grid point")
    counts: List[int] = Field(..., description="Rows falling in each grid bin")
    labels: Optional[List[str]] = Field(default=None, description="Category labels per grid point (categoricals)")
    importance: float = Field(default=0.0, description="Weighted mean absolute contribution")


class InteractionSurface(BaseModel):
    """Pairwise term f_jj' on a grid of bin representatives."""
    features: Tuple[int, int] = Field(..., description="Column indices (j, j') with j < j'")
    feature_names: Tuple[str, str] = Field(..., description="Column names")
    grid_a: List[float] = Field(..., description="Grid for feature j")
    grid_b: List[float] = Field(..., description="Grid for feature j'")
    edges_a: List[float] = Field(default_factory=list, description="Bin boundaries for feature j")
    edges_b: List[float] = Field(default_factory=list, description="Bin boundaries for feature j'")
    values: List[List[float]] = Field(..., description="f_jj' over grid_a x grid_b")
    counts: List[List[int]] = Field(..., description="Joint bin counts")
    importance: float = Field(default=0.0, description="Weighted mean absolute contribution")


class GamExplanation(BaseModel):
    """Intercept, main effects and interactions of an additive model."""
    intercept: float = Field(..., description="f_0")
    shapes: List[ShapeFunction] = Field(..., description="One shape function per feature")
    interactions: List[InteractionSurface] = Field(default_factory=list, description="Sorted by importance, descending")
    units: str = Field(default="model", description="'model' (transformed inputs) or 'raw'")


class TrainingWorkflowState(BaseModel):
    """LangGraph state for the train / pretrain / finetune commands."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    # input
    command: str = Field(..., description="train, pretrain or finetune")
    run_config: Any = Field(..., description="Effective RunConfig")

    frame: Optional[Any] = Field(default=None, description="Loaded pandas DataFrame")
    dataset_schema: Optional[Any] = Field(default=None, description="DatasetSchema")
    pipeline: Optional[Any] = Field(default=None, description="Fitted preprocessing Pipeline")
    arrays: Optional[Dict[str, Any]] = Field(default=None, description="Transformed train/val tensors")
    model: Optional[Any] = Field(default=None, description="NodeGamModel being trained")
    provenance: Optional[Dict[str, Any]] = Field(default=None, description="Lineage recorded in the container")

    # Outputs
    result: Optional[TrainResult] = Field(default=None, description="Training result")
    artifacts: Optional[Dict[str, str]] = Field(default=None, description="Written file paths by kind")

    # Control
    error: Optional[str] = Field(default=None, description="Error message if any")
    exit_code: int = Field(default=0, description="Process exit code for the command")
