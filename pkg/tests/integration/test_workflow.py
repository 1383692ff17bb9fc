import pytest

from models import TrainingWorkflowState
from run_config import build_run_config
from workflow import create_workflow, run_workflow, should_continue


@pytest.fixture
def run_config(tmp_path, sample_files, tiny_overrides):
    csv_path, schema_path = sample_files
    return build_run_config(overrides={
        **tiny_overrides,
        "task": "binary",
        "data": str(csv_path),
        "schema_path": str(schema_path),
        "output_dir": str(tmp_path / "out"),
    })


class TestWorkflowIntegration:
    """Integration tests for the complete training workflow."""

    def test_workflow_end_to_end(self, run_config, tmp_path):
        """Test complete workflow execution."""
        final_state = run_workflow("train", run_config)

        assert final_state.error is None, f"Workflow error: {final_state.error}"
        assert final_state.exit_code == 0
        assert final_state.model.annealed
        assert final_state.result.stop_reason == "max_steps"
        assert set(final_state.artifacts) == {"model", "history", "config"}
        assert (tmp_path / "out" / "model.ngam").exists()

    def test_workflow_stops_at_first_error(self, run_config, tmp_path):
        """Test a failing stage ends the graph before anything is written."""
        final_state = run_workflow("train", run_config.model_copy(update={"schema_path": None}))

        assert final_state.exit_code == 1
        assert final_state.model is None
        assert not (tmp_path / "out").exists()

    def test_unknown_command(self, run_config):
        final_state = run_workflow("evaluate", run_config)

        assert "unknown training command" in final_state.error
        assert final_state.exit_code == 1

    def test_pretrain_workflow(self, run_config):
        final_state = run_workflow("pretrain", run_config)

        assert final_state.error is None
        assert final_state.model.config.num_outputs == 3
        assert final_state.arrays["y_train"] is None


class TestGraph:

    def test_should_continue(self, run_config):
        assert should_continue(TrainingWorkflowState(command="train", run_config=run_config)) == "continue"
        assert should_continue(TrainingWorkflowState(command="train", run_config=run_config, error="x")) == "error"

    def test_graph_compiles_with_every_stage(self):
        graph = create_workflow().compile().get_graph()
        for node in ("load_data", "fit_preprocessing", "build_model", "run_training", "save_artifacts"):
            assert node in graph.nodes
