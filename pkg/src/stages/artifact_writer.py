from pathlib import Path
from typing import Any, Dict

from loguru import logger

from exceptions import NodeGamError
from model_io import save_model
from models import TrainingWorkflowState
from run_config import echo_run_config
from training import write_history


def save_artifacts(state: TrainingWorkflowState) -> Dict[str, Any]:
    """Write model container, history and effective config to the output directory."""
    try:
        out = Path(state.run_config.output_dir)
        artifacts = {
            "model": str(save_model(out / "model.ngam", state.model, state.pipeline, state.provenance)),
            "history": str(write_history(out / "history.jsonl", state.result.history)),
            "config": str(echo_run_config(state.run_config, out / "config.yaml")),
        }
        logger.info(f"Artifacts written to {out}")
        return {"artifacts": artifacts}

    except NodeGamError as e:
        logger.error(f"Saving artifacts failed: {e}")
        return {"error": str(e), "exit_code": e.exit_code}
    except OSError as e:
        logger.error(f"Saving artifacts failed: {e}")
        return {"error": f"could not write artifacts: {e}", "exit_code": 2}
