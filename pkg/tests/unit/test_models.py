import pytest
from pydantic import ValidationError

from models import (
    Arch,
    GamExplanation,
    GamMode,
    HistoryRecord,
    ModelConfig,
    ShapeFunction,
    Task,
    TrainConfig,
    TrainingWorkflowState,
)


class TestModelConfig:
    """Tests for ModelConfig model."""

    def test_defaults(self):
        """Test the default architecture."""
        config = ModelConfig(num_features=4)

        assert config.mode == GamMode.GAM
        assert config.arch == Arch.ATTENTION
        assert config.num_layers == 3
        assert config.trees_per_layer == 666
        assert config.depth == 4
        assert config.num_selectors == 1

    def test_derived_sizes(self):
        config = ModelConfig(num_features=4, mode=GamMode.GA2M, num_layers=2, trees_per_layer=5, addi_tree_dim=2)

        assert config.tree_dim == 3
        assert config.num_selectors == 2
        assert config.outputs_per_layer == 15
        assert config.total_tree_outputs == 30

    def test_ga2m_needs_depth_two(self):
        """Test a depth-1 GA2M tree is rejected."""
        with pytest.raises(ValidationError, match="depth"):
            ModelConfig(num_features=4, mode=GamMode.GA2M, depth=1)

    def test_attention_dim_matches_arch(self):
        with pytest.raises(ValidationError):
            ModelConfig(num_features=4, arch=Arch.PLAIN, attention_dim=8)
        with pytest.raises(ValidationError):
            ModelConfig(num_features=4, arch=Arch.ATTENTION, attention_dim=0)

    def test_multi_head_needs_last_linear(self):
        with pytest.raises(ValidationError):
            ModelConfig(num_features=4, num_outputs=4, add_last_linear=False)

    @pytest.mark.parametrize("field,value", [
        ("colsample", 0.0),
        ("last_dropout", 1.0),
        ("min_temperature", 1.0),
        ("num_features", 0),
    ])
    def test_out_of_range(self, field, value):
        params = {"num_features": 4, field: value}
        with pytest.raises(ValidationError):
            ModelConfig(**params)

    def test_enum_values_from_strings(self):
        config = ModelConfig(num_features=2, mode="ga2m", arch="plain", attention_dim=0, task="binary")

        assert config.mode == GamMode.GA2M
        assert config.task == Task.BINARY


class TestTrainConfig:

    def test_checkpoint_interval_defaults_to_eval_interval(self):
        assert TrainConfig(eval_interval_steps=50).checkpoint_interval == 50
        assert TrainConfig(eval_interval_steps=50, checkpoint_interval_steps=10).checkpoint_interval == 10

    def test_schedule_defaults(self):
        config = TrainConfig()

        assert config.warmup_steps == 500
        assert config.plateau_patience_steps == 5000
        assert config.plateau_decay_factor == 0.2
        assert config.early_stop_steps == 11000
        assert (config.qh_nu1, config.qh_nu2) == (0.7, 1.0)
        assert (config.beta1, config.beta2) == (0.95, 0.998)


class TestExplanationModels:

    def test_history_record_serialization(self):
        """Test HistoryRecord can be serialized to dict."""
        record = HistoryRecord(step=200, train_loss=0.4, val_metric=None, lr=0.01, temperature=0.5)
        data = record.model_dump()

        assert data["step"] == 200
        assert data["val_metric"] is None

    def test_explanation_defaults(self):
        shape = ShapeFunction(feature_index=0, feature_name="age", grid=[0.0], values=[0.0], counts=[3])
        explanation = GamExplanation(intercept=1.0, shapes=[shape])

        assert explanation.units == "model"
        assert explanation.interactions == []
        assert shape.labels is None


class TestTrainingWorkflowState:
    """Tests for TrainingWorkflowState model."""

    def test_initial_state(self):
        """Test the state a workflow starts from."""
        state = TrainingWorkflowState(command="train", run_config=None)

        assert state.frame is None
        assert state.pipeline is None
        assert state.error is None
