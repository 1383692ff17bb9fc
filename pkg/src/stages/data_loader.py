from typing import Any, Dict

from loguru import logger

from data import has_target, load_csv, load_schema
from exceptions import ConfigError, NodeGamError, SchemaError
from model_io import load_model, model_digest
from models import TrainingWorkflowState


def load_data(state: TrainingWorkflowState) -> Dict[str, Any]:
    """
    Read the CSV and schema; for finetuning also the pretrained container.

    Args:
        state: Workflow state carrying the effective RunConfig

    Returns:
        Update with frame, dataset_schema and, when finetuning, model, pipeline and provenance
    """
    try:
        run = state.run_config
        if not run.data:
            raise ConfigError("no input data given", {"command": state.command})
        if not run.schema_path:
            raise ConfigError("no schema file given", {"command": state.command})

        frame = load_csv(run.data)
        schema = load_schema(run.schema_path)
        missing = [c for c in schema.features if c not in frame.columns]
        if missing:
            raise SchemaError("data is missing schema columns", {"missing": missing})
        if state.command != "pretrain" and not has_target(frame, schema):
            raise SchemaError("target column not in data", {"target": schema.target})

        update: Dict[str, Any] = {"frame": frame, "dataset_schema": schema}
        if state.command == "finetune":
            if not run.model_path:
                raise ConfigError("finetuning needs a pretrained model (model_path)")
            artifact = load_model(run.model_path)
            if artifact.pipeline is None or artifact.pipeline.feature_names != schema.features:
                raise SchemaError(
                    "data schema does not match the pretrained model",
                    {"expected": artifact.pipeline.feature_names if artifact.pipeline else None,
                     "got": schema.features}
                )
            update.update({
                "model": artifact.model,
                "pipeline": artifact.pipeline,
                "provenance": {"pretrained_model": str(run.model_path),
                               "pretrained_sha256": model_digest(run.model_path)},
            })
            logger.info(f"Loaded pretrained model from {run.model_path}")
        return update

    except NodeGamError as e:
        logger.error(f"Loading data failed: {e}")
        return {"error": str(e), "exit_code": e.exit_code}
