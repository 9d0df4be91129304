"""
Minibatch training for base models and post-fusion fine-tuning.
"""
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from core.data import Dataset
from core.errors import ConfigError, DivergenceError, ShapeMismatchError
from core.network import ModelSpec, backward, forward
from utils.logger import setup_logger

logger = setup_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""
    optimizer: str = "adam"
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    epochs: int = 30
    batch_size: int = 128
    weight_decay: float = 0.0
    label_smoothing: float = 0.1
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        # lr == 0 is accepted as a frozen run
        if self.lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")

    @classmethod
    def from_mapping(cls, mapping: Dict) -> "TrainConfig":
        """Build from a config section; unknown keys are errors."""
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**mapping)

    def to_dict(self) -> Dict:
        return asdict(self)


FINETUNE_DEFAULTS = TrainConfig(lr=1e-4, min_lr=1e-6, warmup_epochs=0, label_smoothing=0.1, epochs=20)


class SGD:
    """Stochastic gradient descent with optional momentum and decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self._velocity):
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None
        self._t = 0

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        b1, b2 = self.betas
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(tag: str, lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
    """Optimizer instance for a config tag."""
    if tag == "adam":
        return Adam(lr, weight_decay)
    if tag == "sgd":
        return SGD(lr, weight_decay, momentum)
    raise ConfigError(f"unknown optimizer {tag!r}")


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    """
    Linear warmup to cfg.lr over warmup_epochs, then cosine decay to min_lr.

    Epoch e < warmup uses lr * (e + 1) / warmup, so the schedule reaches
    lr exactly where the cosine phase begins.
    """
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    decay_epochs = max(1, cfg.epochs - cfg.warmup_epochs)
    progress = min(1.0, (epoch - cfg.warmup_epochs) / decay_epochs)
    floor = min(cfg.min_lr, cfg.lr)
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, label_smoothing: float = 0.0
                  ) -> Tuple[float, np.ndarray]:
    """
    Mean (label-smoothed) cross-entropy and its gradient w.r.t. the logits.
    """
    n, n_classes = logits.shape
    target = np.full((n, n_classes), label_smoothing / n_classes)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    log_probs = log_softmax(logits, axis=1)
    loss = float(-np.sum(target * log_probs) / n)
    grad = (np.exp(log_probs) - target) / n
    return loss, grad


def evaluate_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lowest class index."""
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    loss, _ = cross_entropy(logits, labels)
    return accuracy, loss


def evaluate(model: ModelSpec, dataset: Dataset) -> Tuple[float, float]:
    """
    Accuracy and mean cross-entropy of a model on a dataset.

    Args:
        model: Model to evaluate
        dataset: Labelled data

    Returns:
        Tuple of (accuracy, mean_ce_loss)
    """
    if dataset.dim != model.input_dim:
        raise ShapeMismatchError(f"dataset has {dataset.dim} features, model expects {model.input_dim}")
    if dataset.n_classes > model.output_dim:
        raise ShapeMismatchError(f"dataset has {dataset.n_classes} classes, model outputs {model.output_dim}")
    return evaluate_logits(forward(model, dataset.features), dataset.labels)


def probabilities(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    """Softmax outputs."""
    return softmax(forward(model, X), axis=1)


def train_logged(model: ModelSpec, dataset: Dataset, cfg: TrainConfig,
                 val_dataset: Optional[Dataset] = None) -> Tuple[ModelSpec, pd.DataFrame]:
    """
    Train a model and return it with its per-epoch log.

    Returns:
        Tuple of (trained model, DataFrame with epoch, lr, train_loss, train_acc, val_acc)
    """
    if dataset.dim != model.input_dim:
        raise ShapeMismatchError(f"dataset has {dataset.dim} features, model expects {model.input_dim}")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    current = model
    rows = []

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        optimizer.lr = lr
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        correct = 0

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            X, y = dataset.features[batch], dataset.labels[batch]
            logits = forward(current, X)
            loss, upstream = cross_entropy(logits, y, cfg.label_smoothing)
            if not math.isfinite(loss):
                logger.error("Training diverged at epoch %d", epoch)
                raise DivergenceError("non-finite training loss", epoch)
            epoch_loss += loss * len(batch)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))

            grads = backward(current, X, upstream).flat_params()
            optimizer.step(params, grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                logger.error("Parameters became non-finite at epoch %d", epoch)
                raise DivergenceError("non-finite parameters", epoch)
            current = current.with_parameters(params)

        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / len(dataset),
            "train_acc": correct / len(dataset),
            "val_acc": evaluate(current, val_dataset)[0] if val_dataset is not None else float("nan"),
        }
        rows.append(row)
        logger.debug("Epoch %d: lr=%.2e loss=%.4f acc=%.4f", epoch, lr, row["train_loss"], row["train_acc"])

    log = pd.DataFrame(rows, columns=["epoch", "lr", "train_loss", "train_acc", "val_acc"])
    logger.info(
        "Training finished: %d epochs, final loss %.4f, final acc %.4f",
        cfg.epochs, log["train_loss"].iloc[-1], log["train_acc"].iloc[-1]
    )
    return current, log


def train(model: ModelSpec, dataset: Dataset, cfg: TrainConfig,
          val_dataset: Optional[Dataset] = None,
          log_path: Optional[Union[str, Path]] = None) -> ModelSpec:
    """
    Train a model with warmup + cosine schedule; optionally write the epoch log CSV.
    """
    trained, log = train_logged(model, dataset, cfg, val_dataset)
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)
    return trained


def finetune(fused: ModelSpec, full_dataset: Dataset, cfg: TrainConfig = FINETUNE_DEFAULTS,
             val_dataset: Optional[Dataset] = None,
             log_path: Optional[Union[str, Path]] = None) -> ModelSpec:
    """Warm-start training of a fused model on the full dataset."""
    logger.info("Fine-tuning fused model for %d epochs at lr %.1e", cfg.epochs, cfg.lr)
    return train(fused, full_dataset, cfg, val_dataset, log_path)
