from typing import Literal

from langgraph.graph import StateGraph, END
from loguru import logger

from exceptions import NodeGamError
from models import TrainingWorkflowState
from run_config import RunConfig
from stages.artifact_writer import save_artifacts
from stages.data_loader import load_data
from stages.model_builder import build_model
from stages.preprocessing import fit_preprocessing
from stages.trainer import run_training

TRAINING_COMMANDS = ("train", "pretrain", "finetune")


def should_continue(state: TrainingWorkflowState) -> Literal["error", "continue"]:
    """
    Determine if workflow should continue or stop due to error.

    Args:
        state: Current workflow state

    Returns:
        "error" if error exists, "continue" otherwise
    """
    if state.error:
        return "error"
    return "continue"


def create_workflow() -> StateGraph:

    workflow = StateGraph(TrainingWorkflowState)

    workflow.add_node("load_data", load_data)
    workflow.add_node("fit_preprocessing", fit_preprocessing)
    workflow.add_node("build_model", build_model)
    workflow.add_node("run_training", run_training)
    workflow.add_node("save_artifacts", save_artifacts)

    workflow.set_entry_point("load_data")

    stages = ["load_data", "fit_preprocessing", "build_model", "run_training", "save_artifacts"]
    for current, following in zip(stages, stages[1:]):
        workflow.add_conditional_edges(
            current,
            should_continue,
            {
                "continue": following,
                "error": END
            }
        )

    workflow.add_edge("save_artifacts", END)

    return workflow


def run_workflow(command: str, run_config: RunConfig) -> TrainingWorkflowState:
    """
    Execute one training command end to end.

    Args:
        command: train, pretrain or finetune
        run_config: Effective configuration

    Returns:
        Final workflow state; `error` and `exit_code` are set on failure
    """
    if command not in TRAINING_COMMANDS:
        return TrainingWorkflowState(command=command, run_config=run_config,
                                     error=f"unknown training command: {command}", exit_code=1)
    try:
        logger.info(f"Starting {command} workflow")

        initial_state = TrainingWorkflowState(command=command, run_config=run_config)
        app = create_workflow().compile()

        # langgraph returns a plain dict
        final_state_dict = app.invoke(initial_state)
        final_state = TrainingWorkflowState(**final_state_dict)

        if final_state.error:
            logger.warning(f"{command} workflow stopped: {final_state.error}")
        else:
            logger.info(f"{command} workflow completed")
        return final_state

    except NodeGamError as e:
        logger.error(f"Workflow execution error: {e}")
        return TrainingWorkflowState(command=command, run_config=run_config, error=str(e), exit_code=e.exit_code)

    except Exception as e:
        logger.opt(exception=e).critical(f"Unexpected workflow error: {e}")
        return TrainingWorkflowState(command=command, run_config=run_config,
                                     error=f"Unexpected workflow error: {e}", exit_code=1)
