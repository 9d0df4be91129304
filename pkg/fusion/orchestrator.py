"""
Fusion Orchestrator
Runs level-by-level fusion of n base models into one fused model
"""
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.data import Dataset
from core.errors import FusionNotApplicableError, InvalidArgumentError, ShapeMismatchError
from core.network import (ActivationBundle, LevelPartition, ModelSpec, forward_collect, partition_for)
from core.numerics import as_matrix
from core.training import evaluate
from fusion.attribution import ImportanceVector, compute_scores
from fusion.grouping import GroupingResult, assignment_to_frame
from fusion.levels import (LevelTemplate, align_initialization, approximation_error, gradient_fit_level,
                           hf_linear_level, kf_gradient_level, kf_linear_level, output_level_fuse,
                           output_level_targets)
from fusion.settings import FusionConfig
from utils.logger import setup_logger

logger = setup_logger(__name__, "INFO")


@dataclass
class LevelReport:
    """Costs and timing of one fused level."""
    level: int
    width: int
    grouping_cost: float
    approximation_error: float
    representation_cost: float
    projection_residual: Optional[float] = None
    seconds: float = 0.0


@dataclass
class FusionReport:
    """Summary of one fusion run."""
    variant: str
    n_models: int
    fusion_samples: int
    widths: List[int]
    levels: List[LevelReport] = field(default_factory=list)
    seconds: float = 0.0
    accuracy: Optional[float] = None
    loss: Optional[float] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())


def _score_weights(scores: Sequence, model_index: int, level: int, width: int) -> np.ndarray:
    vector = scores[model_index][level]
    weights = vector.weights() if isinstance(vector, ImportanceVector) else np.maximum(
        np.asarray(vector, dtype=np.float64).reshape(-1), 1e-12)
    if weights.shape[0] != width:
        raise ShapeMismatchError(
            f"model {model_index} level {level}: {weights.shape[0]} scores for {width} neurons"
        )
    return weights


def assigned_representation_cost(fused_z: np.ndarray, bases_z: np.ndarray, weights: np.ndarray,
                                 assignment: np.ndarray) -> float:
    """sum_j s_j ||z^F_{k_j} - z_j||^2 for a fixed assignment."""
    diff = fused_z[:, assignment] - bases_z
    return float(np.sum(weights * np.sum(diff ** 2, axis=0)))


def representation_cost(fused: ModelSpec, bases: Sequence[ModelSpec], X, scores: Sequence,
                        level: int) -> float:
    """
    Neuron-aware representation cost of a fused model at one level.

    Every base neuron j is charged s_j (z^F_k(x) - z_j(x))^2 against its
    closest fused neuron k, per sample, summed over the batch.

    Args:
        fused: Fused model
        bases: Base models
        X: B x input_dim samples
        scores: Per-model lists of level scores (ImportanceVector or arrays)
        level: Fusion level index

    Returns:
        The cost (nonnegative)
    """
    X = as_matrix(X, "X")
    fused_z = forward_collect(fused, X)[level]
    total = 0.0
    for m, model in enumerate(bases):
        base_z = forward_collect(model, X)[level]
        weights = _score_weights(scores, m, level, base_z.shape[1])
        gaps = (fused_z[:, :, None] - base_z[:, None, :]) ** 2
        total += float(np.sum(weights * gaps.min(axis=1)))
    return total


class FusionOrchestrator:
    """Coordinates activation capture, scoring, grouping and per-level fitting."""

    def __init__(self, cfg: Optional[FusionConfig] = None):
        self.cfg = cfg or FusionConfig()
        self.clusters: List[pd.DataFrame] = []

    def _partitions(self, models: Sequence[ModelSpec]) -> List[LevelPartition]:
        partitions = [partition_for(model.levels, self.cfg.boundary) for model in models]
        counts = {len(p) for p in partitions}
        if len(counts) != 1:
            raise InvalidArgumentError(f"base models disagree on the number of fusion levels: {sorted(counts)}")
        return partitions

    def _check_models(self, models: Sequence[ModelSpec], X: np.ndarray) -> None:
        if not models:
            raise InvalidArgumentError("fusion needs at least one base model")
        if X.shape[0] == 0:
            raise InvalidArgumentError("fusion needs at least one sample")
        if len({m.input_dim for m in models}) != 1 or len({m.output_dim for m in models}) != 1:
            raise ShapeMismatchError("base models disagree on input_dim or output_dim")
        if X.shape[1] != models[0].input_dim:
            raise ShapeMismatchError(f"fusion data has {X.shape[1]} features, models expect {models[0].input_dim}")

    def _fused_widths(self, models: Sequence[ModelSpec], partitions: Sequence[LevelPartition]) -> List[int]:
        n_levels = len(partitions[0])
        output_dim = models[0].output_dim
        widths = list(self.cfg.widths) if self.cfg.widths is not None else models[0].widths(partitions[0])
        if len(widths) == n_levels - 1:
            widths.append(output_dim)
        if len(widths) != n_levels:
            raise InvalidArgumentError(f"{len(widths)} fused widths given for {n_levels} levels")
        if widths[-1] != output_dim:
            raise InvalidArgumentError(f"last fused width must equal output_dim {output_dim}, got {widths[-1]}")

        if self.cfg.variant == "hf_linear":
            if len(models) != 2:
                raise FusionNotApplicableError(f"Hungarian Fusion needs exactly 2 models, got {len(models)}")
            first, second = (m.widths(p) for m, p in zip(models, partitions))
            if first != second or widths != first:
                raise FusionNotApplicableError(
                    f"Hungarian Fusion needs equal widths everywhere, got {first}, {second} and fused {widths}"
                )
        return widths

    def _scores(self, models: Sequence[ModelSpec], X: np.ndarray, labels: Optional[np.ndarray],
                partitions: Sequence[LevelPartition]) -> List[List[ImportanceVector]]:
        scores = []
        for m, (model, partition) in enumerate(zip(models, partitions)):
            targets = labels
            if targets is None and self.cfg.score_kind != "uniform":
                targets = np.argmax(forward_collect(model, X, partition)[-1], axis=1)
                logger.info(f"No labels given; attributing model m{m}'s own predictions")
            scores.append(compute_scores(self.cfg.score_kind, model, X, targets, partition, f"m{m}",
                                         steps=self.cfg.attribution_steps,
                                         normalize=self.cfg.normalize_scores))
        return scores

    def model_scores(self, models: Sequence[ModelSpec], X, labels=None) -> List[List[ImportanceVector]]:
        """Per-model level scores under this run's score kind and fusion boundary."""
        X = as_matrix(X, "X")
        self._check_models(models, X)
        return self._scores(models, X, labels, self._partitions(models))

    def fuse(self, models: Sequence[ModelSpec], X, labels=None, scores: Optional[Sequence] = None,
             class_counts: Optional[Sequence] = None, eval_dataset: Optional[Dataset] = None
             ) -> Tuple[ModelSpec, FusionReport]:
        """
        Fuse base models level by level.

        Args:
            models: Base models sharing input_dim, output_dim and level count
            X: B x input_dim fusion samples
            labels: Labels of the fusion samples (used by attribution scores)
            scores: Per-model lists of level scores; computed from cfg.score_kind when omitted
            class_counts: Per-model training counts per class, for head weights
            eval_dataset: Optional labelled data to evaluate the fused model on

        Returns:
            Tuple of (fused model, FusionReport)
        """
        cfg = self.cfg
        started = time.perf_counter()
        X = as_matrix(X, "X")
        self._check_models(models, X)
        partitions = self._partitions(models)
        widths = self._fused_widths(models, partitions)
        n_levels = len(widths)
        logger.info(f"Fusing {len(models)} models with {cfg.variant} over {n_levels} levels, "
                    f"{X.shape[0]} samples, widths {widths}")

        bundles: List[ActivationBundle] = [
            forward_collect(model, X, partition, f"m{m}")
            for m, (model, partition) in enumerate(zip(models, partitions))
        ]
        if scores is None:
            scores = self._scores(models, X, labels, partitions)
        elif len(scores) != len(models) or any(len(s) != n_levels for s in scores):
            raise ShapeMismatchError("scores must hold one vector per level for every model")

        rng = np.random.default_rng(cfg.seed)
        init_index = int(rng.integers(len(models))) if cfg.variant == "kf_gradient" else 0
        template_model, template_partition = models[init_index], partitions[init_index]
        segments = template_partition.segments()
        if cfg.variant == "kf_gradient":
            logger.info(f"Gradient fusion initialized from model m{init_index}")

        fused_levels = []
        self.clusters = []
        report = FusionReport(cfg.variant, len(models), int(X.shape[0]), widths, config=cfg.to_dict())
        prev_out = X
        alignment: Optional[np.ndarray] = np.arange(X.shape[1])

        for i, (start, stop) in enumerate(segments):
            level_started = time.perf_counter()
            template = LevelTemplate.from_segment(template_model.levels, start, stop)
            H = template.level_input(prev_out)
            Z = ActivationBundle.concat(bundles, i)
            weights = np.concatenate([
                _score_weights(scores, m, i, bundle[i].shape[1]) for m, bundle in enumerate(bundles)
            ])
            residual = None
            last = i == n_levels - 1

            if last and cfg.variant == "kf_gradient":
                grouping = output_level_targets([b[i] for b in bundles], class_counts, cfg.head_weights,
                                                [s[i] for s in scores])
                init, _ = align_initialization(template.affine, None, grouping.targets, alignment, rng,
                                               row_alignment=np.arange(widths[i]))
                affine = gradient_fit_level(prev_out, grouping.targets, template, init,
                                            cfg.last_optimizer, cfg.last_lr, cfg.last_epochs, cfg, rng)
            elif last:
                affine, grouping = output_level_fuse([b[i] for b in bundles], H, class_counts, cfg.head_weights,
                                                     [s[i] for s in scores])
            elif cfg.variant == "hf_linear":
                w1, w2 = np.split(weights, [bundles[0][i].shape[1]])
                affine, grouping, residual = hf_linear_level(bundles[0][i], w1, bundles[1][i], w2, H, cfg)
            elif cfg.variant == "kf_linear":
                affine, grouping, residual = kf_linear_level(Z, weights, H, widths[i], cfg)
            else:
                affine, grouping, alignment = kf_gradient_level(
                    Z, weights, prev_out, template, widths[i], cfg, rng,
                    init_z=bundles[init_index][i], prev_alignment=alignment,
                )

            out = template.level_output(affine, H)
            fused_levels.extend(template.layers(affine))
            self.clusters.append(assignment_to_frame(grouping.assignment, weights, [b.model_id for b in bundles],
                                                     [b[i].shape[1] for b in bundles], i))
            report.levels.append(self._level_report(i, out, Z, weights, grouping, residual,
                                                    time.perf_counter() - level_started))
            prev_out = out

        boundaries = np.cumsum([stop - start for start, stop in segments]) - 1
        fused = ModelSpec(tuple(fused_levels), LevelPartition(tuple(int(b) for b in boundaries)))

        report.seconds = time.perf_counter() - started
        if eval_dataset is not None:
            report.accuracy, report.loss = evaluate(fused, eval_dataset)
            logger.info(f"Fused model: accuracy {report.accuracy:.4f}, loss {report.loss:.4f}")
        logger.info(f"Fusion finished in {report.seconds:.2f}s")
        return fused, report

    def cluster_frame(self) -> pd.DataFrame:
        """Cluster assignment of every base neuron in the last fusion run."""
        if not self.clusters:
            return pd.DataFrame(columns=["model_id", "level", "neuron", "cluster", "score"])
        return pd.concat(self.clusters, ignore_index=True)

    @staticmethod
    def _level_report(level: int, out: np.ndarray, Z: np.ndarray, weights: np.ndarray,
                      grouping: GroupingResult, residual: Optional[float], seconds: float) -> LevelReport:
        approximation = approximation_error(out, grouping, weights)
        represented = assigned_representation_cost(out, Z, weights, grouping.assignment)
        logger.info(
            f"Level {level}: width {out.shape[1]}, grouping cost {grouping.grouping_cost:.6g}, "
            f"approximation error {approximation:.6g}"
        )
        return LevelReport(level, int(out.shape[1]), float(grouping.grouping_cost), approximation,
                           represented, residual, seconds)


def fuse(models: Sequence[ModelSpec], X, labels=None, scores: Optional[Sequence] = None,
         class_counts: Optional[Sequence] = None, cfg: Optional[FusionConfig] = None,
         eval_dataset: Optional[Dataset] = None) -> Tuple[ModelSpec, FusionReport]:
    """Fuse base models with a one-off FusionOrchestrator."""
    return FusionOrchestrator(cfg).fuse(models, X, labels, scores, class_counts, eval_dataset)
