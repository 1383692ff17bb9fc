from typing import Any, Dict

from loguru import logger

from exceptions import InvalidArgumentError, NodeGamError
from models import Task, TrainingWorkflowState
from network import NodeGamModel, output_bias_from_targets


def build_model(state: TrainingWorkflowState) -> Dict[str, Any]:
    """
    Create a fresh model (train: one head; pretrain: one head per feature) or
    check the loaded one (finetune).
    """
    try:
        run = state.run_config
        num_features = state.arrays["x_train"].shape[1]

        if state.command == "finetune":
            config = state.model.config
            if config.num_outputs != config.num_features:
                raise InvalidArgumentError(
                    "head-count mismatch: expected a pretrained model with one head per feature",
                    {"num_outputs": config.num_outputs, "num_features": config.num_features}
                )
            return {}

        if state.command == "pretrain":
            config = run.to_model_config(num_features, num_outputs=num_features, task=Task.REGRESSION)
            model = NodeGamModel(config)
        else:
            config = run.to_model_config(num_features)
            model = NodeGamModel(config, output_bias=output_bias_from_targets(state.arrays["y_train"], run.task))

        params = sum(p.numel() for p in model.parameters())
        logger.info(f"Built {config.mode.value}/{config.arch.value} model: {config.num_layers} layers x "
                    f"{config.trees_per_layer} trees of depth {config.depth}, {params} parameters")
        return {"model": model}

    except NodeGamError as e:
        logger.error(f"Building the model failed: {e}")
        return {"error": str(e), "exit_code": e.exit_code}
