"""
Fitting one fused level: closed-form weighted least squares for the linear
variants, per-level gradient descent for the gradient variant, and the
output level's class-wise targets.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from core.errors import DivergenceError, InvalidArgumentError, ShapeMismatchError
from core.network import ActivationLevel, AffineLevel, Level, backward_layers, forward_layers
from core.numerics import as_matrix, project_columnspace, weighted_least_squares, with_bias_column
from core.training import make_optimizer
from fusion.grouping import (GroupingResult, assignment_from_matching, grouping_cost, hf_cost_matrix,
                             hungarian, local_search_refine, targets_from_assignment, weighted_kmeans)
from fusion.settings import FusionConfig
from utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass(frozen=True)
class LevelTemplate:
    """Layer layout of one fusion level: activations around a single affine map."""
    pre: Tuple[ActivationLevel, ...]
    affine: AffineLevel
    post: Tuple[ActivationLevel, ...]

    @classmethod
    def from_segment(cls, levels: Sequence[Level], start: int, stop: int) -> "LevelTemplate":
        segment = list(levels[start:stop])
        affine_positions = [i for i, level in enumerate(segment) if isinstance(level, AffineLevel)]
        if len(affine_positions) != 1:
            raise InvalidArgumentError(
                f"fusion level covering layers [{start}, {stop}) must contain exactly one affine map, "
                f"found {len(affine_positions)}"
            )
        at = affine_positions[0]
        return cls(tuple(segment[:at]), segment[at], tuple(segment[at + 1:]))

    def layers(self, affine: AffineLevel) -> List[Level]:
        return [*self.pre, affine, *self.post]

    def level_input(self, prev_out: np.ndarray) -> np.ndarray:
        """Input to the affine map given the previous fused level's output."""
        return forward_layers(self.pre, prev_out)[-1] if self.pre else prev_out

    def level_output(self, affine: AffineLevel, level_input: np.ndarray) -> np.ndarray:
        return forward_layers([affine, *self.post], level_input)[-1]


def fit_level_linear(prev_fused_acts, targets, bias: bool = True) -> AffineLevel:
    """
    Closed-form affine fit of a fused level to its targets.

    Solves min ||[X | 1] W - T||^2 with the min-norm weighted least-squares
    kernel. Per-cluster score weights multiply whole columns of the
    objective and leave each column's minimizer unchanged, so the plain
    MSE fit is used.

    Args:
        prev_fused_acts: B x p input to the level's affine map
        targets: B x k targets
        bias: Fit a bias term (appends a column of ones)

    Returns:
        AffineLevel with weight k x p
    """
    X = as_matrix(prev_fused_acts, "prev_fused_acts")
    T = as_matrix(targets, "targets")
    if X.shape[0] != T.shape[0]:
        raise ShapeMismatchError(f"{X.shape[0]} input rows but {T.shape[0]} target rows")
    design = with_bias_column(X) if bias else X
    solution = weighted_least_squares(design, np.ones(X.shape[0]), T)
    if bias:
        return AffineLevel(solution[:-1].T, solution[-1])
    return AffineLevel(solution.T, np.zeros(T.shape[1]))


def cluster_weights(weights: np.ndarray, assignment: np.ndarray, k: int) -> np.ndarray:
    """Total score per fused neuron."""
    return np.bincount(assignment, weights=weights, minlength=k)


def approximation_error(outputs: np.ndarray, grouping: GroupingResult, weights: np.ndarray) -> float:
    """sum_k (sum_{j:k_j=k} s_j) ||z^F_k - T_k||^2."""
    totals = cluster_weights(weights, grouping.assignment, grouping.n_clusters)
    return float(np.sum(totals * np.sum((outputs - grouping.targets) ** 2, axis=0)))


def projection_residual(Z: np.ndarray, projected: np.ndarray, weights: np.ndarray) -> float:
    """sum_j s_j ||(I - P) z_j||^2."""
    return float(np.sum(weights * np.sum((Z - projected) ** 2, axis=0)))


def _cluster(points: np.ndarray, weights: np.ndarray, k: int, cfg: FusionConfig) -> GroupingResult:
    grouping = weighted_kmeans(points, weights, k, seed=cfg.seed, max_iters=cfg.kmeans_max_iters,
                               tol=cfg.kmeans_tol, restarts=cfg.kmeans_restarts,
                               normalize=cfg.normalize_activations)
    if cfg.local_search_rounds > 0:
        features = points
        if cfg.normalize_activations:
            norms = np.linalg.norm(points, axis=1, keepdims=True)
            features = points / np.where(norms > 0, norms, 1.0)
        refined = local_search_refine(grouping, features, weights, cfg.local_search_rounds)
        targets = targets_from_assignment(points.T, weights, refined.assignment, k)
        grouping = GroupingResult(refined.assignment, targets,
                                  grouping_cost(points.T, weights, refined.assignment, targets),
                                  refined.history)
    return grouping


def kf_linear_level(bases_z, scores, prev_fused_acts, k: int, cfg: FusionConfig
                    ) -> Tuple[AffineLevel, GroupingResult, float]:
    """
    K-means Fusion, linear flavor, for one level.

    Base outputs are projected onto the column space of [prev | 1], the
    projected columns are clustered, and the level is fitted to the
    projected centroids (which it reproduces exactly).

    Returns:
        Tuple of (fitted level, grouping on projected outputs, projection residual)
    """
    Z = as_matrix(bases_z, "bases_z")
    weights = np.maximum(np.asarray(scores, dtype=np.float64), 1e-12)
    projected = project_columnspace(with_bias_column(prev_fused_acts), Z)
    grouping = _cluster(projected.T, weights, k, cfg)
    level = fit_level_linear(prev_fused_acts, grouping.targets)
    return level, grouping, projection_residual(Z, projected, weights)


def hf_linear_level(Z1, s1, Z2, s2, prev_fused_acts, cfg: FusionConfig
                    ) -> Tuple[AffineLevel, GroupingResult, float]:
    """
    Hungarian Fusion for one level of two equal-width models.

    Returns:
        Tuple of (fitted level, grouping on projected outputs, projection residual)
    """
    Z1 = as_matrix(Z1, "Z1")
    Z2 = as_matrix(Z2, "Z2")
    if Z1.shape != Z2.shape:
        raise InvalidArgumentError(f"Hungarian Fusion needs equal widths, got {Z1.shape[1]} and {Z2.shape[1]}")
    w1 = np.maximum(np.asarray(s1, dtype=np.float64), 1e-12)
    w2 = np.maximum(np.asarray(s2, dtype=np.float64), 1e-12)
    design = with_bias_column(prev_fused_acts)
    P1 = project_columnspace(design, Z1)
    P2 = project_columnspace(design, Z2)

    perm = hungarian(hf_cost_matrix(P1, w1, P2, w2, cfg.hf_cost_mode))
    assignment = assignment_from_matching(perm)
    projected = np.hstack([P1, P2])
    weights = np.concatenate([w1, w2])
    targets = targets_from_assignment(projected, weights, assignment, Z1.shape[1])
    grouping = GroupingResult(assignment, targets, grouping_cost(projected, weights, assignment, targets))
    level = fit_level_linear(prev_fused_acts, targets)
    residual = projection_residual(np.hstack([Z1, Z2]), projected, weights)
    return level, grouping, residual


def output_level_targets(base_logits: Sequence[np.ndarray], class_counts: Optional[Sequence] = None,
                         head_weights: bool = True, scores: Optional[Sequence] = None) -> GroupingResult:
    """
    Output-level grouping: class c of every model forms cluster c.

    Targets are the weighted mean logits. With head weights, model m's
    weight for class c is its share of all class-c training samples seen by
    the base models, and output-level scores are ignored; otherwise the
    scores (uniform when omitted) weight the logits.

    Args:
        base_logits: One B x C logit matrix per model
        class_counts: Per-model class sample counts (n x C)
        head_weights: Weight logits by per-class sample proportions
        scores: Optional per-model output-level scores

    Returns:
        GroupingResult with B x C targets
    """
    n_classes = base_logits[0].shape[1]
    if any(z.shape[1] != n_classes for z in base_logits):
        raise ShapeMismatchError("base models disagree on output_dim")
    n_models = len(base_logits)

    if head_weights and class_counts is not None:
        counts = np.asarray(class_counts, dtype=np.float64)
        if counts.shape != (n_models, n_classes):
            raise ShapeMismatchError(f"class_counts must be {n_models} x {n_classes}, got {counts.shape}")
        seen = counts.sum(axis=0)
        weights = np.divide(counts, seen, out=np.full_like(counts, 1.0 / n_models), where=seen > 0)
        unseen = np.flatnonzero(seen == 0)
        if unseen.size:
            logger.warning("No base model saw classes %s; using equal head weights for them", unseen.tolist())
    elif scores is not None:
        weights = np.vstack([np.maximum(np.asarray(getattr(s, "scores", s), dtype=np.float64), 1e-12)
                             for s in scores])
    else:
        weights = np.ones((n_models, n_classes))

    flat_weights = weights.reshape(-1)
    assignment = np.tile(np.arange(n_classes), n_models)
    Z = np.hstack(base_logits)
    targets = targets_from_assignment(Z, flat_weights, assignment, n_classes)
    return GroupingResult(assignment, targets, grouping_cost(Z, flat_weights, assignment, targets))


def output_level_fuse(base_logits: Sequence[np.ndarray], prev_fused_acts, class_counts=None,
                      head_weights: bool = True, scores=None) -> Tuple[AffineLevel, GroupingResult]:
    """Closed-form output level fitted to the class-wise mean logits."""
    grouping = output_level_targets(base_logits, class_counts, head_weights, scores)
    return fit_level_linear(prev_fused_acts, grouping.targets), grouping


def align_initialization(template: AffineLevel, init_z: Optional[np.ndarray], targets: np.ndarray,
                         prev_alignment: Optional[np.ndarray], rng: np.random.Generator,
                         row_alignment: Optional[np.ndarray] = None
                         ) -> Tuple[AffineLevel, Optional[np.ndarray]]:
    """
    Initial weights for a gradient-fitted level taken from a base model.

    Rows are permuted so that base neuron alignment[k] seeds fused neuron k
    (found by matching the base level outputs to the targets); columns
    follow the previous level's alignment. When widths differ no alignment
    exists and He-normal weights are drawn instead.

    Returns:
        Tuple of (initial affine level, row alignment or None)
    """
    k = targets.shape[1]
    p = None if prev_alignment is None else prev_alignment.shape[0]
    if row_alignment is None and init_z is not None and init_z.shape[1] == k:
        row_alignment = hungarian(cdist(targets.T, init_z.T, metric="sqeuclidean"))

    if row_alignment is not None and prev_alignment is not None and template.out_dim == k \
            and template.in_dim == p:
        weight = template.weight[row_alignment][:, prev_alignment]
        return AffineLevel(weight, template.bias[row_alignment]), row_alignment

    fan_in = p if p is not None else template.in_dim
    logger.warning("Base level does not align with fused widths; using He-normal initialization")
    return AffineLevel(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(k, fan_in)), np.zeros(k)), None


def perturbation_scale(weight: np.ndarray) -> float:
    """Entry standard deviation of a weight matrix; 1.0 for a constant matrix."""
    scale = float(np.std(weight))
    return scale if scale > 0 else 1.0


def gradient_fit_level(prev_out: np.ndarray, targets: np.ndarray, template: LevelTemplate,
                       init: AffineLevel, optimizer: str, lr: float, epochs: int,
                       cfg: FusionConfig, rng: np.random.Generator) -> AffineLevel:
    """
    Fit one level by minibatch descent on the plain MSE to its targets.

    The initial weights are perturbed by Gaussian noise whose standard
    deviation is epsilon times that of the initial weight matrix, so a
    preset's epsilon means the same at every level width. The weights with
    the best validation loss (perturbed initial weights included) are
    returned, with early stopping after `patience` epochs without
    improvement.
    """
    H = template.level_input(prev_out)
    n = H.shape[0]
    order = rng.permutation(n)
    n_val = int(round(cfg.val_split * n))
    if 0 < n_val < n:
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        val_idx = train_idx = order

    weight = np.array(init.weight)
    bias = np.array(init.bias)
    if cfg.epsilon > 0:
        noise = cfg.epsilon * perturbation_scale(weight)
        weight += noise * rng.normal(size=weight.shape)
        bias += noise * rng.normal(size=bias.shape)
    params = [weight, bias]
    solver = make_optimizer(optimizer, lr, cfg.weight_decay)

    def val_loss() -> float:
        out = template.level_output(AffineLevel(weight, bias), H[val_idx])
        return float(np.mean((out - targets[val_idx]) ** 2))

    best_loss = val_loss()
    best = (weight.copy(), bias.copy())
    stale = 0
    for epoch in range(epochs):
        shuffled = rng.permutation(train_idx)
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start:start + cfg.batch_size]
            layers = [AffineLevel(weight, bias), *template.post]
            out = forward_layers(layers, H[batch])[-1]
            diff = out - targets[batch]
            loss = float(np.mean(diff ** 2))
            if not math.isfinite(loss):
                logger.error("Level fit diverged at epoch %d", epoch)
                raise DivergenceError("non-finite level-fit loss", epoch)
            upstream = 2.0 * diff / diff.size
            grads, _, _ = backward_layers(layers, H[batch], upstream)
            solver.step(params, grads[0])
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise DivergenceError("non-finite level weights", epoch)

        current = val_loss()
        if not math.isfinite(current):
            raise DivergenceError("non-finite validation loss", epoch)
        if current < best_loss:
            best_loss, best, stale = current, (weight.copy(), bias.copy()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.debug("Early stop at epoch %d (best val loss %.6g)", epoch, best_loss)
                break

    logger.debug("Level fit finished with validation loss %.6g", best_loss)
    return AffineLevel(*best)


def kf_gradient_level(bases_z, scores, prev_out: np.ndarray, template: LevelTemplate, k: int,
                      cfg: FusionConfig, rng: np.random.Generator, init_z: Optional[np.ndarray] = None,
                      prev_alignment: Optional[np.ndarray] = None
                      ) -> Tuple[AffineLevel, GroupingResult, Optional[np.ndarray]]:
    """
    K-means Fusion, gradient flavor, for one hidden level.

    Clusters the raw level outputs, then fits the level with the configured
    optimizer starting from the (aligned, perturbed) base-model weights.

    Returns:
        Tuple of (fitted level, grouping, row alignment of the init model or None)
    """
    Z = as_matrix(bases_z, "bases_z")
    weights = np.maximum(np.asarray(scores, dtype=np.float64), 1e-12)
    grouping = _cluster(Z.T, weights, k, cfg)
    init, alignment = align_initialization(template.affine, init_z, grouping.targets, prev_alignment, rng)
    level = gradient_fit_level(prev_out, grouping.targets, template, init,
                               cfg.optimizer, cfg.lr, cfg.epochs, cfg, rng)
    return level, grouping, alignment
