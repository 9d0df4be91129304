"""
Reference points for fusion: parameter averaging, output ensembling and
last-layer knowledge distillation.
"""
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from core.errors import DivergenceError, InvalidArgumentError, ShapeMismatchError
from core.network import AffineLevel, ModelSpec, backward_layers, forward, layer_output
from core.numerics import as_matrix
from core.training import make_optimizer
from utils.logger import setup_logger

logger = setup_logger(__name__)


def vanilla_average(models: Sequence[ModelSpec], scores: Optional[Sequence[Sequence]] = None) -> ModelSpec:
    """
    Average the parameters of models with identical architecture.

    With scores, every row (output neuron) of an affine level is a convex
    combination of the models' rows weighted by that neuron's normalized
    score; without scores the weights are equal.

    Args:
        models: Base models
        scores: Optional per-model lists of level scores, one per affine level

    Returns:
        ModelSpec with the averaged parameters
    """
    if not models:
        raise InvalidArgumentError("vanilla averaging needs at least one model")
    architecture = models[0].architecture()
    if any(m.architecture() != architecture for m in models[1:]):
        raise ShapeMismatchError("vanilla averaging needs identical architectures")

    affine = models[0].affine_indices
    params = [m.parameters() for m in models]
    averaged = []
    for n in range(len(affine)):
        out_dim = params[0][2 * n].shape[0]
        if scores is None:
            weights = np.full((len(models), out_dim), 1.0 / len(models))
        else:
            rows = []
            for m in range(len(models)):
                vector = scores[m][n]
                raw = np.asarray(getattr(vector, "scores", vector), dtype=np.float64).reshape(-1)
                if raw.shape[0] != out_dim:
                    raise ShapeMismatchError(f"model {m} level {n}: {raw.shape[0]} scores for {out_dim} neurons")
                rows.append(raw)
            weights = np.vstack(rows)
            totals = weights.sum(axis=0, keepdims=True)
            # neurons scored zero by every model fall back to equal weights
            weights = np.where(totals > 0, weights / np.where(totals > 0, totals, 1.0), 1.0 / len(models))
        averaged.append(sum(w[:, None] * p[2 * n] for w, p in zip(weights, params)))
        averaged.append(sum(w * p[2 * n + 1] for w, p in zip(weights, params)))
    return models[0].with_parameters(averaged)


def ensemble_predict(models: Sequence[ModelSpec], X) -> np.ndarray:
    """Mean softmax of the models; predicted class is its argmax."""
    if not models:
        raise InvalidArgumentError("ensemble needs at least one model")
    X = as_matrix(X, "X")
    return np.mean([softmax(forward(model, X), axis=1) for model in models], axis=0)


def last_layer_kd(models: Sequence[ModelSpec], init: ModelSpec, X, epochs: int = 100, lr: float = 1e-3,
                  batch_size: int = 32, optimizer: str = "adam", weight_decay: float = 0.0,
                  seed: int = 0) -> ModelSpec:
    """
    Distill the base models' mean softmax into the last affine level of `init`.

    Every other level stays frozen; the loss is KL(teacher || student)
    averaged over the samples.
    """
    X = as_matrix(X, "X")
    teacher = ensemble_predict(models, X)
    if teacher.shape[1] != init.output_dim:
        raise ShapeMismatchError(f"base models output {teacher.shape[1]} classes, init outputs {init.output_dim}")

    last = init.affine_indices[-1]
    features = layer_output(init, X, last - 1)
    head = init.levels[last]
    weight, bias = np.array(head.weight), np.array(head.bias)
    params = [weight, bias]
    solver = make_optimizer(optimizer, lr, weight_decay)
    rng = np.random.default_rng(seed)
    log_teacher = np.log(np.maximum(teacher, 1e-300))

    for epoch in range(epochs):
        order = rng.permutation(X.shape[0])
        epoch_loss = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            level = AffineLevel(weight, bias)
            logits = level.apply(features[batch])
            log_student = log_softmax(logits, axis=1)
            loss = float(np.sum(teacher[batch] * (log_teacher[batch] - log_student)) / batch.size)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite distillation loss", epoch)
            epoch_loss += loss * batch.size
            upstream = (np.exp(log_student) - teacher[batch]) / batch.size
            grads, _, _ = backward_layers([level], features[batch], upstream)
            solver.step(params, grads[0])
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise DivergenceError("non-finite head weights", epoch)
        logger.debug("Distillation epoch %d: KL %.6f", epoch, epoch_loss / X.shape[0])

    return init.replace_level(last, AffineLevel(weight, bias))
