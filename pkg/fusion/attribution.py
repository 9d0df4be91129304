"""
Per-neuron importance scores for every level of a base model.
"""
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import InvalidArgumentError, ShapeMismatchError
from core.network import (ActivationLevel, AffineLevel, ModelSpec, LevelPartition,
                          backward_from, forward_layers, layer_output)
from core.numerics import as_matrix
from utils.logger import setup_logger

logger = setup_logger(__name__)

ScoreKind = Literal["uniform", "conductance", "deeplift"]
SCORE_KINDS = ("uniform", "conductance", "deeplift")

SCORE_FLOOR = 1e-12
DEFAULT_STEPS = 64


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    """Nonnegative scores for the neurons of one level of one model."""
    level: int
    model_id: str
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.size == 0:
            raise InvalidArgumentError("importance vector must not be empty")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise InvalidArgumentError("importance scores must be finite and nonnegative")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size

    def weights(self, floor: float = SCORE_FLOOR) -> np.ndarray:
        """Scores raised to the floor, safe to use as mean weights."""
        return np.maximum(self.scores, floor)

    def normalized(self) -> "ImportanceVector":
        """Scores rescaled to sum to one."""
        weights = self.weights()
        return ImportanceVector(self.level, self.model_id, weights / weights.sum())


def uniform_scores(width: int, level: int = 0, model_id: str = "") -> ImportanceVector:
    """Equal weight 1/width for every neuron."""
    if width < 1:
        raise InvalidArgumentError(f"width must be at least 1, got {width}")
    return ImportanceVector(level, model_id, np.full(width, 1.0 / width))


def _one_hot(targets: np.ndarray, n_samples: int, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n_samples:
        raise ShapeMismatchError(f"{targets.shape[0]} targets for {n_samples} samples")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise InvalidArgumentError(f"targets must lie in [0, {n_classes})")
    upstream = np.zeros((n_samples, n_classes))
    upstream[np.arange(n_samples), targets] = 1.0
    return upstream


def _baseline_for(inputs: np.ndarray, baseline: Optional[np.ndarray]) -> np.ndarray:
    if baseline is None:
        return np.zeros_like(inputs)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.ndim == 1:
        baseline = np.broadcast_to(baseline, inputs.shape)
    if baseline.shape != inputs.shape:
        raise ShapeMismatchError(f"baseline shape {baseline.shape} does not match inputs {inputs.shape}")
    return baseline


def conductance_per_sample(model: ModelSpec, layer: int, inputs: np.ndarray, targets: np.ndarray,
                           baseline: Optional[np.ndarray] = None, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """
    Per-sample conductance of every neuron of one layer output.

    Riemann sum over path points alpha = t/steps, t = 1..steps, of
    dF_target/dz_j at x(alpha) times the increment of z_j since the
    previous path point. Layer -1 attributes the input features.

    Returns:
        B x width matrix of signed conductances
    """
    if steps < 2:
        raise InvalidArgumentError(f"steps must be at least 2, got {steps}")
    inputs = as_matrix(inputs, "inputs")
    baseline = _baseline_for(inputs, baseline)
    upstream = _one_hot(targets, inputs.shape[0], model.output_dim)

    delta = inputs - baseline
    previous = layer_output(model, baseline, layer)
    total = np.zeros_like(previous)
    for t in range(1, steps + 1):
        point = baseline + (t / steps) * delta
        z = layer_output(model, point, layer)
        grad = backward_from(model, layer, z, upstream)
        total += grad * (z - previous)
        previous = z
    return total


def _deeplift_multipliers(model: ModelSpec, layer: int, inputs: np.ndarray, baseline: np.ndarray,
                          upstream: np.ndarray) -> np.ndarray:
    """Rescale-rule multipliers of the target logit w.r.t. the output of `layer`."""
    rest = model.levels[layer + 1:]
    start_x = layer_output(model, inputs, layer)
    start_ref = layer_output(model, baseline, layer)
    acts_x = [start_x] + (forward_layers(rest, start_x) if rest else [])
    acts_ref = [start_ref] + (forward_layers(rest, start_ref) if rest else [])

    multiplier = upstream
    for i in range(len(rest) - 1, -1, -1):
        level = rest[i]
        if isinstance(level, AffineLevel):
            multiplier = multiplier @ level.weight
        elif isinstance(level, ActivationLevel):
            pre_delta = acts_x[i] - acts_ref[i]
            post_delta = acts_x[i + 1] - acts_ref[i + 1]
            gradient = level.derivative(acts_x[i])
            safe = np.abs(pre_delta) > 1e-12
            ratio = np.where(safe, post_delta / np.where(safe, pre_delta, 1.0), gradient)
            multiplier = multiplier * ratio
        else:
            raise InvalidArgumentError(f"unsupported level type {type(level).__name__} for DeepLIFT")
    return multiplier


def deeplift_per_sample(model: ModelSpec, layer: int, inputs: np.ndarray, targets: np.ndarray,
                        baseline: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-sample Rescale-rule contributions of one layer's outputs to the
    target logit difference F(x) - F(baseline).

    Returns:
        B x width matrix whose rows sum to the logit difference
    """
    inputs = as_matrix(inputs, "inputs")
    baseline = _baseline_for(inputs, baseline)
    upstream = _one_hot(targets, inputs.shape[0], model.output_dim)
    multipliers = _deeplift_multipliers(model, layer, inputs, baseline, upstream)
    return multipliers * (layer_output(model, inputs, layer) - layer_output(model, baseline, layer))


def _boundary(model: ModelSpec, level: int, partition: Optional[LevelPartition]) -> int:
    partition = partition or model.partition
    if not 0 <= level < len(partition):
        raise InvalidArgumentError(f"level {level} out of range for {len(partition)} levels")
    return partition.boundaries[level]


def conductance_scores(model: ModelSpec, level: int, inputs: np.ndarray, targets: np.ndarray,
                       baseline: Optional[np.ndarray] = None, steps: int = DEFAULT_STEPS,
                       partition: Optional[LevelPartition] = None, model_id: str = "") -> ImportanceVector:
    """
    Conductance importance of the neurons of one fusion level.

    Args:
        model: Base model
        level: Fusion level index into the partition
        inputs: B x input_dim samples
        targets: Class whose logit is attributed, per sample
        baseline: Reference inputs (zeros by default)
        steps: Riemann steps along the straight path
        partition: Level boundaries (the model's own by default)

    Returns:
        ImportanceVector of mean absolute conductances over the batch
    """
    layer = _boundary(model, level, partition)
    per_sample = conductance_per_sample(model, layer, inputs, targets, baseline, steps)
    return ImportanceVector(level, model_id, np.mean(np.abs(per_sample), axis=0))


def deeplift_scores(model: ModelSpec, level: int, inputs: np.ndarray, targets: np.ndarray,
                    baseline: Optional[np.ndarray] = None, partition: Optional[LevelPartition] = None,
                    model_id: str = "") -> ImportanceVector:
    """DeepLIFT (Rescale) importance of one fusion level: mean absolute contribution."""
    layer = _boundary(model, level, partition)
    per_sample = deeplift_per_sample(model, layer, inputs, targets, baseline)
    return ImportanceVector(level, model_id, np.mean(np.abs(per_sample), axis=0))


def compute_scores(kind: ScoreKind, model: ModelSpec, inputs: np.ndarray, targets: np.ndarray,
                   partition: Optional[LevelPartition] = None, model_id: str = "",
                   baseline: Optional[np.ndarray] = None, steps: int = DEFAULT_STEPS,
                   normalize: bool = False) -> List[ImportanceVector]:
    """
    One ImportanceVector per fusion level of a model.

    Args:
        kind: 'uniform', 'conductance' or 'deeplift'
        normalize: Rescale each vector to sum to one
    """
    if kind not in SCORE_KINDS:
        raise InvalidArgumentError(f"unknown score kind {kind!r}; expected one of {', '.join(SCORE_KINDS)}")
    partition = partition or model.partition
    logger.info("Computing %s scores for model %s over %d levels", kind, model_id or "?", len(partition))

    vectors = []
    for level, width in enumerate(model.widths(partition)):
        if kind == "uniform":
            vector = uniform_scores(width, level, model_id)
        elif kind == "conductance":
            vector = conductance_scores(model, level, inputs, targets, baseline, steps, partition, model_id)
        else:
            vector = deeplift_scores(model, level, inputs, targets, baseline, partition, model_id)
        if not np.any(vector.scores > 0):
            logger.warning("All %s scores are zero for model %s level %d", kind, model_id, level)
        vectors.append(vector.normalized() if normalize else vector)
    return vectors


def scores_to_frame(vectors: Sequence[ImportanceVector]) -> pd.DataFrame:
    """Score dump with columns model_id, level, neuron, score."""
    rows = [
        {"model_id": v.model_id, "level": v.level, "neuron": j, "score": float(s)}
        for v in vectors for j, s in enumerate(v.scores)
    ]
    return pd.DataFrame(rows, columns=["model_id", "level", "neuron", "score"])


def scores_from_frame(frame: pd.DataFrame) -> dict:
    """Inverse of scores_to_frame: {model_id: [ImportanceVector per level]}."""
    missing = {"model_id", "level", "neuron", "score"} - set(frame.columns)
    if missing:
        raise InvalidArgumentError(f"score table missing columns: {', '.join(sorted(missing))}")
    result = {}
    for model_id, group in frame.groupby("model_id", sort=False):
        vectors = []
        for level, rows in group.groupby("level"):
            rows = rows.sort_values("neuron")
            vectors.append(ImportanceVector(int(level), str(model_id), rows["score"].to_numpy()))
        result[str(model_id)] = vectors
    return result
