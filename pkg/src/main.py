import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional

import pandas as pd
import torch
from loguru import logger

from config import settings
from data import load_csv
from exceptions import ConfigError, NodeGamError, NumericalError
from interpret import (
    audit_reconstruction,
    explain_model,
    explanation_to_raw_units,
    write_explanation,
    write_term_csvs,
)
from model_io import load_model
from models import Task
from network import predict
from run_config import RunConfig, build_run_config, parse_overrides
from training import configure_determinism
from utils.atomic import atomic_write_text
from workflow import TRAINING_COMMANDS, run_workflow

AUDIT_TOLERANCE = 1e-5

# flag dest -> RunConfig key
FLAG_KEYS = {
    "data": "data",
    "schema": "schema_path",
    "model": "model_path",
    "output_dir": "output_dir",
    "seed": "seed",
    "threads": "threads",
    "deterministic": "deterministic",
    "val_fraction": "val_fraction",
    "label_fraction": "label_fraction",
    "task": "task",
    "mode": "mode",
    "arch": "arch",
    "depth": "depth",
    "lr": "lr",
    "max_steps": "max_steps",
    "bins": "bins",
    "audit": "audit",
}


class CliArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        logger.error(f"Usage error: {message}")
        raise SystemExit(1)


def configure_logging(level: Optional[str] = None) -> None:
    logger.remove()
    logger.add(
        sys.stderr,
        level=level or settings.LOG_LEVEL,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}",
    )


def configure_runtime(run: RunConfig) -> None:
    """Deterministic mode forces one thread; otherwise `threads` > 0 bounds torch's pool."""
    configure_determinism(run.deterministic)
    if run.deterministic:
        torch.set_num_threads(1)
    elif run.threads > 0:
        torch.set_num_threads(run.threads)
    logger.debug(f"torch threads: {torch.get_num_threads()}, deterministic: {run.deterministic}")


def build_parser() -> argparse.ArgumentParser:
    shared = CliArgumentParser(add_help=False)
    shared.add_argument("--config", help="Flat YAML config file")
    shared.add_argument("--preset", help="Shipped preset, e.g. 'wine:ga2m'")
    shared.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key (repeatable)")
    shared.add_argument("--data", help="Input CSV with a header row")
    shared.add_argument("--schema", help="YAML schema: column -> numeric|categorical|target")
    shared.add_argument("--model", help="Model container to read")
    shared.add_argument("--output-dir", help="Directory for written files")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threads", type=int)
    shared.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    shared.add_argument("--log-level", help="Override NODEGAM_LOG_LEVEL")

    parser = CliArgumentParser(prog="nodegam", description="Train, pretrain, finetune and explain NODE-GAM models")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)

    for name, help_text in (("train", "Supervised training"),
                            ("pretrain", "Masked-feature self-supervised pretraining"),
                            ("finetune", "Finetune a pretrained model on labels")):
        sub = commands.add_parser(name, parents=[shared], help=help_text)
        sub.add_argument("--val-fraction", type=float)
        sub.add_argument("--task", choices=["binary", "regression"])
        sub.add_argument("--mode", choices=["gam", "ga2m"])
        sub.add_argument("--arch", choices=["plain", "attention"])
        sub.add_argument("--depth", type=int)
        sub.add_argument("--lr", type=float)
        sub.add_argument("--max-steps", type=int)
        if name == "finetune":
            sub.add_argument("--label-fraction", type=float, help="Keep this share of labelled training rows")

    sub = commands.add_parser("predict", parents=[shared], help="Score rows with a saved model")
    sub.add_argument("--output", help="Predictions CSV (default: <output-dir>/predictions.csv)")

    sub = commands.add_parser("explain", parents=[shared], help="Export shape functions and interactions")
    sub.add_argument("--bins", type=int, help="Quantile bins per feature for GA2M terms")
    sub.add_argument("--audit", action="store_true", default=None, help="Check the additive reconstruction")
    sub.add_argument("--model-units", action="store_true",
                     help="Write grids in transformed model units instead of raw feature units")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = parse_overrides(args.overrides)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return overrides


def cmd_training(command: str, run: RunConfig) -> int:
    final_state = run_workflow(command, run)
    if final_state.error:
        logger.error(f"{command} failed: {final_state.error}")
        return final_state.exit_code or 1

    result = final_state.result
    logger.info("=" * 50)
    logger.info(f"{command.upper()} SUMMARY")
    logger.info("=" * 50)
    logger.info(f"Stop reason:   {result.stop_reason}")
    logger.info(f"Best metric:   {result.best_metric}")
    logger.info(f"Evaluations:   {len(result.history)}")
    for kind, path in (final_state.artifacts or {}).items():
        logger.info(f"{kind:14} {path}")
    return 0


def _require(run: RunConfig, *keys: str) -> None:
    missing = [key for key in keys if getattr(run, key) is None]
    if missing:
        raise ConfigError("missing required settings", {"keys": missing})


def cmd_predict(run: RunConfig, output: Optional[str] = None) -> Path:
    """
    Score every row of `run.data`.

    Writes row_id and score (score_k per head for multi-head models), plus
    probability for binary models. Row order is preserved.
    """
    _require(run, "model_path", "data")
    artifact = load_model(run.model_path)
    frame = load_csv(run.data)
    if artifact.pipeline is None:
        raise ConfigError("model container has no preprocessing pipeline", {"model": run.model_path})
    x = artifact.pipeline.transform_array(frame)

    model = artifact.model
    num_outputs = model.config.num_outputs
    score_columns = ["score"] if num_outputs == 1 else [f"score_{k}" for k in range(num_outputs)]
    binary = model.config.task == Task.BINARY and num_outputs == 1
    columns = ["row_id"] + score_columns + (["probability"] if binary else [])

    out = pd.DataFrame(columns=columns)
    if x.shape[0]:
        prediction = predict(model, torch.as_tensor(x, dtype=torch.float64))
        out = pd.DataFrame(prediction.scores.numpy(), columns=score_columns)
        out.insert(0, "row_id", range(x.shape[0]))
        if binary:
            out["probability"] = prediction.probabilities.numpy()[:, 0]

    path = Path(output) if output else Path(run.output_dir) / "predictions.csv"
    atomic_write_text(path, out.to_csv(index=False, float_format="%.17g"))
    logger.info(f"Wrote {len(out)} predictions to {path}")
    return path


def cmd_explain(run: RunConfig, model_units: bool = False) -> Path:
    """
    Explanation JSON in raw feature units, plus optional per-term CSVs and
    reconstruction audit. The audit runs on the model-unit explanation.

    Raises:
        InvalidStateError: If the model has not finished annealing
        NumericalError: If the audit gap at bin representatives exceeds 1e-5
    """
    _require(run, "model_path", "data")
    artifact = load_model(run.model_path)
    if artifact.pipeline is None:
        raise ConfigError("model container has no preprocessing pipeline", {"model": run.model_path})
    x = artifact.pipeline.transform_array(load_csv(run.data))

    explanation = explain_model(
        artifact.model, x,
        feature_names=artifact.pipeline.feature_names,
        max_bins=run.bins,
        weighted_purify=run.weighted_purify,
    )
    out_dir = Path(run.output_dir)
    audit = audit_reconstruction(explanation, artifact.model, x) if run.audit else None

    written = explanation if model_units else explanation_to_raw_units(explanation, artifact.pipeline)
    path = write_explanation(out_dir / "explanation.json", written)
    if run.term_csvs:
        write_term_csvs(out_dir / "terms", written)
    logger.info(f"Explanation: {len(written.shapes)} shape functions, {len(written.interactions)} interactions -> {path}")

    if audit is not None:
        atomic_write_text(out_dir / "audit.json", json.dumps(audit.model_dump(), indent=2))
        if audit.max_gap_representatives > AUDIT_TOLERANCE:
            raise NumericalError(
                "reconstruction does not match the model",
                {"max_gap": audit.max_gap_representatives, "tolerance": AUDIT_TOLERANCE}
            )
    return path


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run = build_run_config(args.preset, args.config, collect_overrides(args))
        configure_runtime(run)
        if args.command in TRAINING_COMMANDS:
            return cmd_training(args.command, run)
        if args.command == "predict":
            cmd_predict(run, args.output)
        else:
            cmd_explain(run, model_units=args.model_units)
        return 0

    except NodeGamError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code

    except Exception as e:
        logger.opt(exception=e).critical(f"Fatal Error: {e}")
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
