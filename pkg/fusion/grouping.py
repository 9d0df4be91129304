"""
Grouping of base-model neurons into fused neurons: Hungarian matching for
two equal-width models, importance-weighted K-means in general, and the
importance-weighted target means that every fused level is fitted to.

Neuron outputs are handled as columns of a B x d matrix Z (one column per
neuron, one row per fusion sample); K-means treats each column as a point.
"""
from dataclasses import dataclass, field, replace
from typing import List, Literal, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from core.errors import InvalidArgumentError, ShapeMismatchError
from core.numerics import as_matrix
from utils.logger import setup_logger

logger = setup_logger(__name__)

CostMode = Literal["exact", "heuristic"]


@dataclass(eq=False)
class GroupingResult:
    """Cluster index per base neuron plus the B x k target matrix."""
    assignment: np.ndarray
    targets: np.ndarray
    grouping_cost: float
    history: List[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.targets.shape[1]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)


class CostDecomposition(NamedTuple):
    """Neuron-aware cost of a fixed assignment split into its parts."""
    total: float
    approximation: float
    grouping: float
    cross_term: float


def _as_weights(weights, length: int) -> np.ndarray:
    weights = np.asarray(getattr(weights, "scores", weights), dtype=np.float64).reshape(-1)
    if weights.shape[0] != length:
        raise ShapeMismatchError(f"{weights.shape[0]} weights for {length} neurons")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidArgumentError("weights must be finite and nonnegative")
    return weights


def _check_cost(cost) -> np.ndarray:
    cost = as_matrix(cost, "cost")
    if cost.shape[0] != cost.shape[1]:
        raise InvalidArgumentError(f"cost matrix must be square, got shape {cost.shape}")
    return cost


def hungarian(cost) -> np.ndarray:
    """
    Exact minimum-cost one-to-one matching.

    Args:
        cost: Square finite cost matrix

    Returns:
        Permutation p with row i matched to column p[i]
    """
    cost = _check_cost(cost)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def matching_cost(cost, perm: np.ndarray) -> float:
    cost = np.asarray(cost)
    return float(cost[np.arange(cost.shape[0]), perm].sum())


def hf_cost_matrix(Z1, s1, Z2, s2, mode: CostMode = "exact") -> np.ndarray:
    """
    Pairwise matching costs between the neurons of two models.

    exact: the pair's grouping error s1||z1 - T||^2 + s2||z2 - T||^2 with T
    the importance-weighted mean, which equals s1 s2 / (s1 + s2) ||z1 - z2||^2.
    heuristic: ||z1 - z2||^2.

    Args:
        Z1, Z2: B x d level outputs of the two models
        s1, s2: Scores (ImportanceVector or array) of length d

    Returns:
        d x d nonnegative cost matrix
    """
    Z1 = as_matrix(Z1, "Z1")
    Z2 = as_matrix(Z2, "Z2")
    if Z1.shape != Z2.shape:
        raise InvalidArgumentError(f"level outputs differ in shape: {Z1.shape} vs {Z2.shape}")
    distances = cdist(Z1.T, Z2.T, metric="sqeuclidean")
    if mode == "heuristic":
        return distances
    if mode != "exact":
        raise InvalidArgumentError(f"unknown cost mode {mode!r}")

    w1 = np.maximum(_as_weights(s1, Z1.shape[1]), 1e-12)
    w2 = np.maximum(_as_weights(s2, Z2.shape[1]), 1e-12)
    pair = np.outer(w1, w2) / (w1[:, None] + w2[None, :])
    return pair * distances


def assignment_from_matching(perm: np.ndarray) -> np.ndarray:
    """
    Cluster indices for the concatenated neurons [model 1 | model 2]:
    neuron j of model 1 and neuron perm[j] of model 2 share cluster j.
    """
    d = perm.shape[0]
    second = np.empty(d, dtype=np.int64)
    second[perm] = np.arange(d)
    return np.concatenate([np.arange(d), second])


def targets_from_assignment(Z, s, assignment: Sequence[int], n_clusters: Optional[int] = None) -> np.ndarray:
    """
    Importance-weighted mean of the member columns of each cluster.

    Args:
        Z: B x d level outputs
        s: Length-d scores (already floored)
        assignment: Cluster index of each neuron
        n_clusters: Number of clusters (max index + 1 by default)

    Returns:
        B x n_clusters target matrix
    """
    Z = as_matrix(Z, "Z")
    weights = _as_weights(s, Z.shape[1])
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape[0] != Z.shape[1]:
        raise ShapeMismatchError(f"assignment covers {assignment.shape[0]} of {Z.shape[1]} neurons")
    n_clusters = int(n_clusters if n_clusters is not None else assignment.max() + 1)
    if assignment.min() < 0 or assignment.max() >= n_clusters:
        raise InvalidArgumentError("assignment index out of range")

    totals = np.bincount(assignment, weights=weights, minlength=n_clusters)
    if np.any(totals <= 0):
        empty = np.flatnonzero(totals <= 0).tolist()
        raise InvalidArgumentError(f"clusters {empty} are empty or carry zero total score")
    membership = np.zeros((Z.shape[1], n_clusters))
    membership[np.arange(Z.shape[1]), assignment] = weights
    return (Z @ membership) / totals


def grouping_cost(Z, s, assignment: Sequence[int], targets: np.ndarray) -> float:
    """sum_j s_j ||T_{k_j} - z_j||^2 over the batch."""
    Z = as_matrix(Z, "Z")
    weights = _as_weights(s, Z.shape[1])
    assignment = np.asarray(assignment, dtype=np.int64)
    return float(np.sum(weights * np.sum((targets[:, assignment] - Z) ** 2, axis=0)))


def decompose_cost(fused_Z, Z, s, assignment: Sequence[int]) -> CostDecomposition:
    """
    Split sum_j s_j ||z^F_{k_j} - z_j||^2 into approximation, grouping and cross terms.

    The targets are the importance-weighted means, so the cross term vanishes.
    """
    fused_Z = as_matrix(fused_Z, "fused_Z")
    Z = as_matrix(Z, "Z")
    weights = _as_weights(s, Z.shape[1])
    assignment = np.asarray(assignment, dtype=np.int64)
    targets = targets_from_assignment(Z, weights, assignment, fused_Z.shape[1])

    fused_cols = fused_Z[:, assignment]
    target_cols = targets[:, assignment]
    total = float(np.sum(weights * np.sum((fused_cols - Z) ** 2, axis=0)))
    approximation = float(np.sum(weights * np.sum((fused_cols - target_cols) ** 2, axis=0)))
    grouping = float(np.sum(weights * np.sum((target_cols - Z) ** 2, axis=0)))
    cross = float(2.0 * np.sum(weights * np.sum((fused_cols - target_cols) * (target_cols - Z), axis=0)))
    return CostDecomposition(total, approximation, grouping, cross)


def _kmeans_objective(points: np.ndarray, weights: np.ndarray, labels: np.ndarray,
                      centers: np.ndarray) -> float:
    return float(np.sum(weights * np.sum((points - centers[labels]) ** 2, axis=1)))


def _weighted_centers(points: np.ndarray, weights: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return targets_from_assignment(points.T, weights, labels, k).T


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties go to the lowest cluster index
    return np.argmin(cdist(points, centers, metric="sqeuclidean"), axis=1)


def _repair_empty(points: np.ndarray, weights: np.ndarray, labels: np.ndarray,
                  centers: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest (weighted) from its centroid."""
    labels = labels.copy()
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        sizes = np.bincount(labels, minlength=k)
        movable = sizes[labels] > 1
        distance = weights * np.sum((points - centers[labels]) ** 2, axis=1)
        distance[~movable] = -np.inf
        donor = int(np.argmax(distance))
        logger.debug("Empty cluster %d repaired with point %d", cluster, donor)
        labels[donor] = cluster
        centers = centers.copy()
        centers[cluster] = points[donor]
    return labels


def _kmeans_plus_plus(points: np.ndarray, weights: np.ndarray, k: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Weighted K-means++ seeding: next center drawn with probability ~ w * D^2."""
    n = points.shape[0]
    first = rng.choice(n, p=weights / weights.sum())
    centers = [points[first]]
    closest = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(1, k):
        mass = weights * closest
        if mass.sum() <= 0:
            choice = rng.choice(n, p=weights / weights.sum())
        else:
            choice = rng.choice(n, p=mass / mass.sum())
        centers.append(points[choice])
        closest = np.minimum(closest, np.sum((points - points[choice]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int, tol: float):
    centers = _kmeans_plus_plus(points, weights, k, rng)
    labels = _repair_empty(points, weights, _nearest(points, centers), centers, k)
    centers = _weighted_centers(points, weights, labels, k)
    objective = _kmeans_objective(points, weights, labels, centers)
    history = [objective]

    for iteration in range(max_iters):
        new_labels = _repair_empty(points, weights, _nearest(points, centers), centers, k)
        new_centers = _weighted_centers(points, weights, new_labels, k)
        new_objective = _kmeans_objective(points, weights, new_labels, new_centers)
        history.append(new_objective)
        converged = np.array_equal(new_labels, labels)
        relative = (objective - new_objective) / max(objective, 1e-300)
        labels, centers, objective = new_labels, new_centers, new_objective
        if converged or relative < tol:
            logger.debug("Lloyd stopped after %d iterations (objective %.6g)", iteration + 1, objective)
            break
    return labels, centers, objective, history


def _normalize_rows(points: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    return points / np.where(norms > 0, norms, 1.0)


def weighted_kmeans(points, weights, k: int, seed: int = 0, max_iters: int = 100,
                    tol: float = 1e-10, restarts: int = 5, normalize: bool = False) -> GroupingResult:
    """
    Importance-weighted Lloyd's algorithm with K-means++ seeding and restarts.

    Args:
        points: d x B matrix, one neuron per row
        weights: Length-d nonnegative scores
        k: Number of clusters (fused width)
        seed: Seed for every restart
        max_iters: Lloyd iteration cap per restart
        tol: Stop when the relative objective decrease falls below tol
        restarts: Seeded restarts; the lowest objective wins
        normalize: Cluster unit-norm copies of the points (targets use the raw points)

    Returns:
        GroupingResult with targets of shape B x k
    """
    points = as_matrix(points, "points")
    d = points.shape[0]
    weights = np.maximum(_as_weights(weights, d), 1e-12)
    if k < 1 or k > d:
        raise InvalidArgumentError(f"k must be in [1, {d}], got {k}")

    features = _normalize_rows(points) if normalize else points
    seeds = np.random.SeedSequence(seed).spawn(max(1, restarts))
    best = None
    for child in seeds:
        run = _lloyd(features, weights, k, np.random.default_rng(child), max_iters, tol)
        if best is None or run[2] < best[2]:
            best = run

    labels, _, _, history = best
    targets = targets_from_assignment(points.T, weights, labels, k)
    cost = grouping_cost(points.T, weights, labels, targets)
    logger.info("Weighted K-means: %d neurons into %d clusters, cost %.6g", d, k, cost)
    return GroupingResult(labels, targets, cost, history)


def local_search_refine(result: GroupingResult, points, weights, rounds: int = 10) -> GroupingResult:
    """
    Best-improvement single-swap refinement of a clustering.

    Each round tries replacing every centroid by every point, reassigns
    points to their nearest centroid, recomputes the weighted means and keeps
    the best strictly improving swap. The returned cost never exceeds the
    input cost.
    """
    points = as_matrix(points, "points")
    d = points.shape[0]
    weights = np.maximum(_as_weights(weights, d), 1e-12)
    k = result.n_clusters

    labels = np.asarray(result.assignment, dtype=np.int64)
    centers = _weighted_centers(points, weights, labels, k)
    cost = _kmeans_objective(points, weights, labels, centers)
    history = list(result.history) or [cost]

    for round_index in range(rounds):
        best_cost, best_labels = cost, None
        for cluster in range(k):
            for candidate in range(d):
                trial = centers.copy()
                trial[cluster] = points[candidate]
                trial_labels = _repair_empty(points, weights, _nearest(points, trial), trial, k)
                trial_centers = _weighted_centers(points, weights, trial_labels, k)
                trial_cost = _kmeans_objective(points, weights, trial_labels, trial_centers)
                if trial_cost < best_cost - 1e-12 * max(1.0, abs(best_cost)):
                    best_cost, best_labels = trial_cost, trial_labels
        if best_labels is None:
            logger.debug("Local search converged after %d rounds", round_index)
            break
        labels = best_labels
        centers = _weighted_centers(points, weights, labels, k)
        cost = best_cost
        history.append(cost)

    targets = targets_from_assignment(points.T, weights, labels, k)
    return replace(result, assignment=labels, targets=targets,
                   grouping_cost=grouping_cost(points.T, weights, labels, targets), history=history)


def assignment_to_frame(assignment: np.ndarray, scores: np.ndarray, model_ids: Sequence[str],
                        widths: Sequence[int], level: int) -> pd.DataFrame:
    """Cluster dump with columns model_id, level, neuron, cluster, score."""
    rows = []
    offset = 0
    for model_id, width in zip(model_ids, widths):
        for neuron in range(width):
            rows.append({
                "model_id": model_id, "level": level, "neuron": neuron,
                "cluster": int(assignment[offset + neuron]), "score": float(scores[offset + neuron]),
            })
        offset += width
    return pd.DataFrame(rows, columns=["model_id", "level", "neuron", "cluster", "score"])
