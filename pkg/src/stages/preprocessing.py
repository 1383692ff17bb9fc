from typing import Any, Dict

from loguru import logger

from data import extract_targets, has_target, split_train_val
from exceptions import NodeGamError
from models import Task, TrainingWorkflowState
from preprocess import fit_pipeline
from training import labeled_subset


def fit_preprocessing(state: TrainingWorkflowState) -> Dict[str, Any]:
    """
    Split rows, fit the pipeline on the training split only and transform both splits.

    A finetuning run reuses the pipeline stored with the pretrained model so the
    trees see the same inputs they were pretrained on.
    """
    try:
        run = state.run_config
        frame, schema = state.frame, state.dataset_schema
        supervised = state.command != "pretrain"
        targets = extract_targets(frame, schema, run.task) if (supervised or has_target(frame, schema)) else None

        train_frame, val_frame, y_train, y_val = split_train_val(
            frame, targets, run.val_fraction, run.seed,
            stratify=supervised and run.task == Task.BINARY,
        )
        if state.pipeline is not None:
            pipeline = state.pipeline
        else:
            pipeline = fit_pipeline(train_frame, schema, targets=y_train, seed=run.seed)

        x_train = pipeline.transform_array(train_frame)
        x_val = pipeline.transform_array(val_frame)
        if supervised and run.label_fraction is not None:
            x_train, y_train = labeled_subset(x_train, y_train, run.label_fraction, run.seed)
            logger.info(f"Using {len(y_train)} labelled rows ({run.label_fraction:.2%} of the training split)")

        arrays = {
            "x_train": x_train,
            "x_val": x_val,
            "y_train": y_train if supervised else None,
            "y_val": y_val if supervised else None,
        }
        logger.info(f"Prepared {x_train.shape[0]} training and {x_val.shape[0]} validation rows "
                    f"with {x_train.shape[1]} features")
        return {"pipeline": pipeline, "arrays": arrays}

    except NodeGamError as e:
        logger.error(f"Preprocessing failed: {e}")
        return {"error": str(e), "exit_code": e.exit_code}
