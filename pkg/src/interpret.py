"""
Explanations for trained additive models.

GAM shapes come from output differences against a baseline row; GA2M terms
come from aggregating each annealed tree's weighted output into the table of
its feature or feature pair. Interaction tables can then be purified (row and
column means pushed into the main effects) and every main effect centred so
its data-weighted mean lives in the intercept.
"""
import re
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from pydantic import BaseModel, Field

from exceptions import InvalidArgumentError, InvalidStateError, NonAdditivityError
from models import GamExplanation, GamMode, InteractionSurface, ShapeFunction
from network import NodeGamModel, dependency_report, predict, tree_columns
from preprocess import Pipeline
from utils.atomic import atomic_write_text

DEFAULT_BINS = 256
ADDITIVITY_TOL = 1e-6
PURIFY_TOL = 1e-10
PURIFY_MAX_SWEEPS = 500

PredictFn = Callable[[np.ndarray], np.ndarray]


class Binning(NamedTuple):
    grid: np.ndarray      # bin representatives, ascending
    edges: np.ndarray     # len(grid) - 1 boundaries; value v falls in searchsorted(edges, v, "left")
    counts: np.ndarray
    index: np.ndarray     # bin of every input row


class Purified(NamedTuple):
    surface: np.ndarray
    main_a: np.ndarray
    main_b: np.ndarray
    sweeps: int


class ReconstructionAudit(BaseModel):
    """Largest |reconstruction - model| over audited rows."""
    max_gap_representatives: float = Field(..., description="Rows snapped to bin representatives (exact up to rounding)")
    max_gap_rows: float = Field(..., description="Rows as given (includes the binning gap)")
    rows: int = Field(..., description="Rows audited")


def bin_feature(column: np.ndarray, max_bins: Optional[int] = DEFAULT_BINS) -> Binning:
    """
    Unique values when there are at most `max_bins` of them (or max_bins is None),
    otherwise at most `max_bins` quantile bins represented by their within-bin mean.
    Empty bins are dropped.
    """
    column = np.asarray(column, dtype=np.float64)
    if column.size == 0:
        raise InvalidArgumentError("cannot bin an empty column")
    unique, inverse, counts = np.unique(column, return_inverse=True, return_counts=True)
    if max_bins is None or unique.size <= max_bins:
        return Binning(unique, (unique[:-1] + unique[1:]) / 2, counts, inverse.reshape(-1))

    cuts = np.unique(np.quantile(column, np.linspace(0.0, 1.0, max_bins + 1)[1:-1]))
    raw_index = np.searchsorted(cuts, column, side="left")
    occupied, index = np.unique(raw_index, return_inverse=True)
    index = index.reshape(-1)
    counts = np.bincount(index)
    grid = np.bincount(index, weights=column) / counts
    edges = cuts[occupied[:-1]]
    return Binning(grid, edges, counts, index)


def assign_bins(edges: Sequence[float], values: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.asarray(edges, dtype=np.float64), np.asarray(values, dtype=np.float64), side="left")


def importance(values: np.ndarray, counts: np.ndarray) -> float:
    """Data-weighted mean absolute value of a term."""
    values = np.abs(np.asarray(values, dtype=np.float64))
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if values.size == 0:
        return 0.0
    if total <= 0:
        return float(values.mean())
    return float((values * counts).sum() / total)


def model_predict_fn(model: NodeGamModel, batch_size: int = 4096, output: int = 0) -> PredictFn:
    """Wrap a model as a pure numpy function of model-unit rows."""
    def predict_fn(x: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
        parts = [predict(model, x[i:i + batch_size]).scores[:, output] for i in range(0, x.shape[0], batch_size)]
        return torch.cat(parts).numpy() if parts else np.zeros(0)
    return predict_fn


def _default_names(d: int, feature_names: Optional[Sequence[str]]) -> List[str]:
    if feature_names is None:
        return [f"x{j}" for j in range(d)]
    if len(feature_names) != d:
        raise InvalidArgumentError("feature_names length mismatch", {"names": len(feature_names), "features": d})
    return list(feature_names)


def _check_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidArgumentError("data must be a non-empty 2-D array", {"shape": data.shape})
    return data


def _check_additivity(
    predict_fn: PredictFn,
    data: np.ndarray,
    shapes: List[ShapeFunction],
    seed: int,
    num_baselines: int = 10,
    values_per_feature: int = 8,
) -> None:
    rng = np.random.default_rng(seed)
    baselines = data[rng.choice(data.shape[0], size=min(num_baselines, data.shape[0]), replace=False)]
    queries, expected = [], []
    for shape in shapes:
        grid = np.asarray(shape.grid)
        picks = np.unique(np.linspace(0, grid.size - 1, min(values_per_feature, grid.size)).round().astype(int))
        for b in baselines:
            rows = np.repeat(b[None], picks.size + 1, axis=0)
            rows[1:, shape.feature_index] = grid[picks]
            queries.append(rows)
            expected.append(np.asarray(shape.values)[picks])
    outputs = predict_fn(np.concatenate(queries, axis=0))

    gap, offset = 0.0, 0
    for rows, want in zip(queries, expected):
        got = outputs[offset + 1:offset + rows.shape[0]] - outputs[offset]
        gap = max(gap, float(np.abs(got - want).max(initial=0.0)))
        offset += rows.shape[0]
    if gap > ADDITIVITY_TOL:
        raise NonAdditivityError(
            "feature effects depend on the baseline; the model is not additive",
            {"max_gap": gap, "tolerance": ADDITIVITY_TOL}
        )
    logger.debug(f"Additivity check passed (max gap {gap:.2e})")


def extract_gam_shapes(
    predict_fn: PredictFn,
    data,
    baseline: Optional[np.ndarray] = None,
    feature_names: Optional[Sequence[str]] = None,
    check_additivity: bool = True,
    seed: int = 0,
) -> GamExplanation:
    """
    Shape functions by differencing: f_j(v) = predict(baseline with x_j = v) - predict(baseline),
    over every unique value v of x_j, then centred into the intercept.

    Raises:
        NonAdditivityError: If differences depend on the baseline beyond 1e-6
    """
    data = _check_data(data)
    n, d = data.shape
    names = _default_names(d, feature_names)
    baseline = data.mean(axis=0) if baseline is None else np.asarray(baseline, dtype=np.float64)
    f_base = float(predict_fn(baseline[None])[0])

    shapes = []
    for j in range(d):
        binning = bin_feature(data[:, j], max_bins=None)
        queries = np.repeat(baseline[None], binning.grid.size, axis=0)
        queries[:, j] = binning.grid
        values = predict_fn(queries) - f_base
        shapes.append(ShapeFunction(
            feature_index=j,
            feature_name=names[j],
            grid=binning.grid.tolist(),
            edges=binning.edges.tolist(),
            values=values.tolist(),
            counts=binning.counts.tolist(),
        ))

    if check_additivity:
        _check_additivity(predict_fn, data, shapes, seed)
    explanation = GamExplanation(intercept=f_base, shapes=shapes)
    logger.info(f"Extracted {d} shape functions from {n} rows")
    return center_terms(explanation)


@torch.no_grad()
def _tree_outputs(model: NodeGamModel, x: np.ndarray, batch_size: int) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        xt = torch.as_tensor(x, dtype=torch.float64)
        parts = [model(xt[i:i + batch_size], training=False).tree_outputs for i in range(0, xt.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(parts, dim=0)


def _term_columns(model: NodeGamModel, trees: List[Tuple[int, int]]) -> torch.Tensor:
    return torch.cat([torch.arange(model.config.total_tree_outputs)[tree_columns(model, l, i)] for l, i in trees])


def extract_ga2m_terms(
    model: NodeGamModel,
    data,
    max_bins: int = DEFAULT_BINS,
    feature_names: Optional[Sequence[str]] = None,
    baseline: Optional[np.ndarray] = None,
    batch_size: int = 4096,
) -> GamExplanation:
    """
    Aggregate annealed trees into main and pairwise tables (unpurified, uncentred).

    Each tree's contribution X_P[:, tree] @ W_L[tree] is evaluated at bin
    representatives; the read-out bias and output bias form the intercept.
    Trees on a degenerate pair (j, j) count towards f_j.

    Raises:
        InvalidStateError: If the model is not fully annealed
    """
    if not model.annealed:
        raise InvalidStateError(
            "training incomplete: selections are not one-hot yet",
            {"step": int(model.step), "anneal_steps": model.config.anneal_steps}
        )
    data = _check_data(data)
    n, d = data.shape
    if d != model.config.num_features:
        raise InvalidArgumentError("feature count mismatch", {"expected": model.config.num_features, "got": d})
    names = _default_names(d, feature_names)
    baseline = data.mean(axis=0) if baseline is None else np.asarray(baseline, dtype=np.float64)
    binnings = [bin_feature(data[:, j], max_bins) for j in range(d)]

    main_trees: Dict[int, List[Tuple[int, int]]] = {}
    pair_trees: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for l, layer in enumerate(dependency_report(model)):
        for i, features in enumerate(layer):
            if len(features) == 1 or features[0] == features[1]:
                main_trees.setdefault(features[0], []).append((l, i))
            else:
                pair_trees.setdefault(features, []).append((l, i))
    weight = model.last_linear.detach()[:, 0]

    def contributions(queries: np.ndarray, trees: List[Tuple[int, int]]) -> np.ndarray:
        columns = _term_columns(model, trees)
        outputs = _tree_outputs(model, queries, batch_size)
        return (outputs[:, columns] @ weight[columns]).numpy()

    shapes = []
    for j in range(d):
        binning = binnings[j]
        if j in main_trees:
            queries = np.repeat(baseline[None], binning.grid.size, axis=0)
            queries[:, j] = binning.grid
            values = contributions(queries, main_trees[j])
        else:
            values = np.zeros(binning.grid.size)
        shapes.append(ShapeFunction(
            feature_index=j,
            feature_name=names[j],
            grid=binning.grid.tolist(),
            edges=binning.edges.tolist(),
            values=values.tolist(),
            counts=binning.counts.tolist(),
        ))

    interactions = []
    for (a, b), trees in sorted(pair_trees.items()):
        bin_a, bin_b = binnings[a], binnings[b]
        mesh_a, mesh_b = np.meshgrid(bin_a.grid, bin_b.grid, indexing="ij")
        queries = np.repeat(baseline[None], mesh_a.size, axis=0)
        queries[:, a] = mesh_a.reshape(-1)
        queries[:, b] = mesh_b.reshape(-1)
        values = contributions(queries, trees).reshape(mesh_a.shape)
        counts = np.zeros(mesh_a.shape, dtype=np.int64)
        np.add.at(counts, (bin_a.index, bin_b.index), 1)
        interactions.append(InteractionSurface(
            features=(a, b),
            feature_names=(names[a], names[b]),
            grid_a=bin_a.grid.tolist(),
            grid_b=bin_b.grid.tolist(),
            edges_a=bin_a.edges.tolist(),
            edges_b=bin_b.edges.tolist(),
            values=values.tolist(),
            counts=counts.tolist(),
            importance=importance(values, counts),
        ))

    intercept = float(model.bias.detach()[0] + model.output_bias[0])
    logger.info(
        f"Aggregated {sum(len(t) for t in main_trees.values())} main-effect trees and "
        f"{sum(len(t) for t in pair_trees.values())} interaction trees into "
        f"{d} mains and {len(interactions)} pairs"
    )
    return GamExplanation(intercept=intercept, shapes=shapes, interactions=interactions)


def _means(table: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    total = weights.sum(axis=axis)
    weighted = (table * weights).sum(axis=axis)
    return np.divide(weighted, total, out=np.zeros_like(weighted), where=total > 0)


def purify(
    surface: np.ndarray,
    main_a: np.ndarray,
    main_b: np.ndarray,
    weights: Optional[np.ndarray] = None,
    tol: float = PURIFY_TOL,
    max_sweeps: int = PURIFY_MAX_SWEEPS,
) -> Purified:
    """
    Alternately move row means of the surface into main_a and column means into
    main_b until both are below `tol`. The pointwise sum
    main_a[k] + main_b[k'] + surface[k, k'] is preserved.

    Args:
        surface: [Ka, Kb] interaction table
        main_a: [Ka] main effect of the row feature
        main_b: [Kb] main effect of the column feature
        weights: Optional [Ka, Kb] bin counts; uniform means when None
    """
    surface = np.array(surface, dtype=np.float64)
    main_a = np.array(main_a, dtype=np.float64)
    main_b = np.array(main_b, dtype=np.float64)
    if surface.shape != (main_a.size, main_b.size):
        raise InvalidArgumentError(
            "surface shape must match the main effects",
            {"surface": surface.shape, "main_a": main_a.size, "main_b": main_b.size}
        )
    weights = np.ones_like(surface) if weights is None else np.asarray(weights, dtype=np.float64)

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rows = _means(surface, weights, axis=1)
        surface -= rows[:, None]
        main_a += rows
        cols = _means(surface, weights, axis=0)
        surface -= cols[None, :]
        main_b += cols
        if max(np.abs(rows).max(initial=0.0), np.abs(cols).max(initial=0.0)) < tol:
            break
    return Purified(surface, main_a, main_b, sweeps)


def purify_terms(explanation: GamExplanation, weighted: bool = False) -> GamExplanation:
    """Purify every interaction surface into its two main effects."""
    mains = {s.feature_index: np.asarray(s.values, dtype=np.float64) for s in explanation.shapes}
    surfaces = []
    for surface in explanation.interactions:
        a, b = surface.features
        result = purify(
            surface.values, mains[a], mains[b],
            weights=np.asarray(surface.counts) if weighted else None,
        )
        mains[a], mains[b] = result.main_a, result.main_b
        surfaces.append(surface.model_copy(update={
            "values": result.surface.tolist(),
            "importance": importance(result.surface, surface.counts),
        }))
        logger.debug(f"Purified ({surface.feature_names[0]}, {surface.feature_names[1]}) in {result.sweeps} sweeps")
    shapes = [s.model_copy(update={"values": mains[s.feature_index].tolist()}) for s in explanation.shapes]
    return explanation.model_copy(update={"shapes": shapes, "interactions": surfaces})


def center_terms(explanation: GamExplanation) -> GamExplanation:
    """Shift every main effect to zero data-weighted mean; shifts go into the intercept."""
    intercept = explanation.intercept
    shapes = []
    for shape in explanation.shapes:
        values = np.asarray(shape.values, dtype=np.float64)
        counts = np.asarray(shape.counts, dtype=np.float64)
        shift = float((values * counts).sum() / counts.sum()) if counts.sum() > 0 else 0.0
        values = values - shift
        intercept += shift
        shapes.append(shape.model_copy(update={
            "values": values.tolist(),
            "importance": importance(values, counts),
        }))
    interactions = [
        s.model_copy(update={"importance": importance(s.values, s.counts)}) for s in explanation.interactions
    ]
    return explanation.model_copy(update={"intercept": intercept, "shapes": shapes, "interactions": interactions})


def sort_interactions(explanation: GamExplanation) -> GamExplanation:
    ordered = sorted(explanation.interactions, key=lambda s: s.importance, reverse=True)
    return explanation.model_copy(update={"interactions": ordered})


def reconstruct(explanation: GamExplanation, rows) -> np.ndarray:
    """f0 + sum_j f_j(x_j) + sum_jj' f_jj'(x_j, x_j') with every value looked up in its bin."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    total = np.full(rows.shape[0], explanation.intercept, dtype=np.float64)
    for shape in explanation.shapes:
        total += np.asarray(shape.values)[assign_bins(shape.edges, rows[:, shape.feature_index])]
    for surface in explanation.interactions:
        a, b = surface.features
        table = np.asarray(surface.values)
        total += table[assign_bins(surface.edges_a, rows[:, a]), assign_bins(surface.edges_b, rows[:, b])]
    return total


def snap_to_representatives(explanation: GamExplanation, rows) -> np.ndarray:
    """Replace every value by the representative of its bin."""
    snapped = np.array(rows, dtype=np.float64)
    for shape in explanation.shapes:
        j = shape.feature_index
        snapped[:, j] = np.asarray(shape.grid)[assign_bins(shape.edges, snapped[:, j])]
    return snapped


def audit_reconstruction(explanation: GamExplanation, model: NodeGamModel, rows) -> ReconstructionAudit:
    """
    Compare the additive reconstruction with the model on `rows` (model units).

    Raises:
        InvalidArgumentError: If the explanation is in raw units
    """
    if explanation.units != "model":
        raise InvalidArgumentError("audit needs an explanation in model units", {"units": explanation.units})
    rows = _check_data(rows)
    predict_fn = model_predict_fn(model)
    snapped = snap_to_representatives(explanation, rows)
    gap_reps = float(np.abs(reconstruct(explanation, snapped) - predict_fn(snapped)).max())
    gap_rows = float(np.abs(reconstruct(explanation, rows) - predict_fn(rows)).max())
    logger.info(f"Reconstruction audit on {rows.shape[0]} rows: "
                f"max gap {gap_reps:.2e} at bin representatives, {gap_rows:.2e} on raw rows")
    return ReconstructionAudit(max_gap_representatives=gap_reps, max_gap_rows=gap_rows, rows=rows.shape[0])


def explain_model(
    model: NodeGamModel,
    data,
    feature_names: Optional[Sequence[str]] = None,
    max_bins: int = DEFAULT_BINS,
    purify_interactions: bool = True,
    weighted_purify: bool = False,
) -> GamExplanation:
    """
    Full explanation of an annealed model: differencing for GAM; aggregation,
    purification and centring for GA2M. Interactions are sorted by importance.
    """
    if not model.annealed:
        raise InvalidStateError(
            "training incomplete: selections are not one-hot yet",
            {"step": int(model.step), "anneal_steps": model.config.anneal_steps}
        )
    if model.config.mode == GamMode.GAM:
        return extract_gam_shapes(model_predict_fn(model), data, feature_names=feature_names, seed=model.config.seed)
    explanation = extract_ga2m_terms(model, data, max_bins=max_bins, feature_names=feature_names)
    if purify_interactions:
        explanation = purify_terms(explanation, weighted=weighted_purify)
    return sort_interactions(center_terms(explanation))


def explanation_to_raw_units(explanation: GamExplanation, pipeline: Pipeline) -> GamExplanation:
    """Map grids and edges back to raw feature units; categorical grids gain category labels."""
    def raw(name: str, values) -> List[float]:
        return pipeline.inverse_numeric(name, np.asarray(values, dtype=np.float64)).tolist()

    shapes = []
    for shape in explanation.shapes:
        name = pipeline.feature_names[shape.feature_index]
        labels = pipeline.category_labels(name, np.asarray(shape.grid)) if name in pipeline.encoders else None
        shapes.append(shape.model_copy(update={
            "grid": raw(name, shape.grid),
            "edges": raw(name, shape.edges),
            "labels": labels,
        }))
    interactions = []
    for surface in explanation.interactions:
        a, b = (pipeline.feature_names[j] for j in surface.features)
        interactions.append(surface.model_copy(update={
            "grid_a": raw(a, surface.grid_a),
            "grid_b": raw(b, surface.grid_b),
            "edges_a": raw(a, surface.edges_a),
            "edges_b": raw(b, surface.edges_b),
        }))
    return explanation.model_copy(update={"shapes": shapes, "interactions": interactions, "units": "raw"})


def write_explanation(path: Union[str, Path], explanation: GamExplanation) -> Path:
    return atomic_write_text(path, explanation.model_dump_json(indent=2))


def load_explanation(path: Union[str, Path]) -> GamExplanation:
    return GamExplanation.model_validate_json(Path(path).read_text(encoding="utf-8"))


def sanitize_name(name: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("._")
    return cleaned or "feature"


def write_term_csvs(directory: Union[str, Path], explanation: GamExplanation) -> List[Path]:
    """Plot data: one CSV per main effect and one long-format CSV per interaction."""
    directory = Path(directory)
    written = []
    for shape in explanation.shapes:
        frame = pd.DataFrame({"grid": shape.grid, "value": shape.values, "count": shape.counts})
        if shape.labels is not None:
            frame.insert(1, "label", shape.labels)
        path = directory / f"main_{shape.feature_index:03d}_{sanitize_name(shape.feature_name)}.csv"
        written.append(atomic_write_text(path, frame.to_csv(index=False)))
    for surface in explanation.interactions:
        mesh_a, mesh_b = np.meshgrid(surface.grid_a, surface.grid_b, indexing="ij")
        frame = pd.DataFrame({
            "grid_a": mesh_a.reshape(-1),
            "grid_b": mesh_b.reshape(-1),
            "value": np.asarray(surface.values).reshape(-1),
            "count": np.asarray(surface.counts).reshape(-1),
        })
        a, b = (sanitize_name(n) for n in surface.feature_names)
        path = directory / f"pair_{surface.features[0]:03d}_{surface.features[1]:03d}_{a}__{b}.csv"
        written.append(atomic_write_text(path, frame.to_csv(index=False)))
    logger.info(f"Wrote {len(written)} plot-data files to {directory}")
    return written
