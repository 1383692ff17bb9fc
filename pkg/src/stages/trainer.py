from typing import Any, Dict

from loguru import logger

from exceptions import NodeGamError
from models import TrainingWorkflowState
from training import finetune, pretrain, train


def run_training(state: TrainingWorkflowState) -> Dict[str, Any]:
    """Dispatch to supervised training, pretraining or finetuning."""
    try:
        run = state.run_config
        config = run.to_train_config()
        arrays = state.arrays

        if state.command == "pretrain":
            result = pretrain(state.model, arrays["x_train"], arrays["x_val"], config)
        elif state.command == "finetune":
            result = finetune(state.model, arrays["x_train"], arrays["y_train"],
                              arrays["x_val"], arrays["y_val"], config, task=run.task)
        else:
            result = train(state.model, arrays["x_train"], arrays["y_train"],
                           arrays["x_val"], arrays["y_val"], config)

        logger.info(f"{state.command} finished: {result.stop_reason}, best metric {result.best_metric}")
        return {"result": result, "model": result.model}

    except NodeGamError as e:
        logger.error(f"Training failed: {e}")
        return {"error": str(e), "exit_code": e.exit_code}
