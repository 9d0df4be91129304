"""
Datasets (IDX files, synthetic blobs) and the partitioning regimes used to
give each base model its own share of the training data.
"""
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from core.errors import IdxFormatError, InvalidArgumentError, ShapeMismatchError
from core.numerics import as_matrix
from utils.logger import setup_logger

logger = setup_logger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer class labels in [0, n_classes)."""
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = as_matrix(self.features, "features")
        labels = np.asarray(self.labels).reshape(-1)
        if features.shape[0] < 1:
            raise InvalidArgumentError("dataset needs at least one sample")
        if labels.shape[0] != features.shape[0]:
            raise ShapeMismatchError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise InvalidArgumentError("labels must be integers")
            labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise InvalidArgumentError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class SplitPlan:
    """Per-model index lists produced by one partitioning regime (disjoint except for full plans)."""
    regime: str
    seed: int
    parameters: Dict[str, Any]
    indices: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.indices = [np.asarray(idx, dtype=np.int64) for idx in self.indices]

    @property
    def n_models(self) -> int:
        return len(self.indices)

    def validate(self, n_samples: int, cover: bool = False) -> None:
        """Check disjointness, range and (optionally) full coverage; full plans cover per model."""
        merged = np.concatenate(self.indices) if self.indices else np.array([], dtype=np.int64)
        if merged.size and (merged.min() < 0 or merged.max() >= n_samples):
            raise InvalidArgumentError("split indices out of range")
        if self.regime == "full":
            if cover and any(np.unique(idx).size != n_samples for idx in self.indices):
                raise InvalidArgumentError(f"full split must give every model all {n_samples} samples")
            return
        if np.unique(merged).size != merged.size:
            raise InvalidArgumentError("split index lists overlap")
        if cover and merged.size != n_samples:
            raise InvalidArgumentError(f"split covers {merged.size} of {n_samples} samples")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regime": self.regime,
            "seed": self.seed,
            "parameters": self.parameters,
            "indices": [idx.tolist() for idx in self.indices],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SplitPlan":
        missing = {"regime", "seed", "parameters", "indices"} - set(payload)
        if missing:
            raise InvalidArgumentError(f"split plan missing keys: {', '.join(sorted(missing))}")
        return cls(payload["regime"], int(payload["seed"]), dict(payload["parameters"]),
                   [np.asarray(idx, dtype=np.int64) for idx in payload["indices"]])

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        logger.info("Split plan (%s, %d models) written to %s", self.regime, self.n_models, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, remainders going to the largest fractional parts."""
    raw = fractions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties deterministic (lowest model index first)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_split(labels: Sequence[int], n_models: int, alpha_min: float = 1.0,
                    min_max_ratio: float = 0.2, seed: int = 0) -> SplitPlan:
    """
    Non-IID split: per class, Dirichlet proportions over models.

    Concentrations run linearly from alpha_min to alpha_min / min_max_ratio,
    one per model, and are shuffled per class together with the class's
    sample indices.

    Args:
        labels: Class label of every sample
        n_models: Number of base models
        alpha_min: Smallest concentration parameter
        min_max_ratio: alpha_min / alpha_max, in (0, 1]
        seed: Seed for every random draw

    Returns:
        SplitPlan whose index lists partition all samples
    """
    if n_models < 1:
        raise InvalidArgumentError("n_models must be at least 1")
    if not 0 < min_max_ratio <= 1:
        raise InvalidArgumentError(f"min_max_ratio must be in (0, 1], got {min_max_ratio}")
    if alpha_min <= 0:
        raise InvalidArgumentError(f"alpha_min must be positive, got {alpha_min}")

    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    alphas = np.linspace(alpha_min, alpha_min / min_max_ratio, n_models)

    shares: List[List[np.ndarray]] = [[] for _ in range(n_models)]
    for c in np.unique(labels):
        class_idx = rng.permutation(np.flatnonzero(labels == c))
        proportions = rng.dirichlet(rng.permutation(alphas))
        counts = _largest_remainder(proportions, class_idx.size)
        for model, chunk in enumerate(np.split(class_idx, np.cumsum(counts)[:-1])):
            shares[model].append(chunk)

    indices = [np.sort(np.concatenate(chunks)) if chunks else np.array([], dtype=np.int64)
               for chunks in shares]
    plan = SplitPlan(
        "dirichlet", seed,
        {"n_models": n_models, "alpha_min": alpha_min, "min_max_ratio": min_max_ratio,
         "alphas": alphas.tolist()},
        indices,
    )
    logger.info("Dirichlet split: %d models, sizes %s", n_models, [len(i) for i in indices])
    return plan


def full_split(n_samples: int, n_models: int, seed: int = 0) -> SplitPlan:
    """
    Full-dataset setup: every model trains on all samples.

    The models differ only through their initialization and shuffling
    seeds, so the plan repeats the full index range once per model.
    """
    if n_models < 1:
        raise InvalidArgumentError("n_models must be at least 1")
    if n_samples < 1:
        raise InvalidArgumentError("full_split needs at least one sample")
    everything = np.arange(n_samples, dtype=np.int64)
    plan = SplitPlan("full", seed, {"n_models": n_models}, [everything.copy() for _ in range(n_models)])
    logger.info("Full split: %d models on all %d samples", n_models, n_samples)
    return plan


def sharded_split(labels: Sequence[int], n_models: int, seed: int = 0,
                  n_classes: Optional[int] = None) -> SplitPlan:
    """
    Sharded split: each model gets every sample of a disjoint class subset.

    Args:
        labels: Class label of every sample
        n_models: Number of base models, at most the class count
        seed: Seed for the class permutation
        n_classes: Class count (defaults to max label + 1)

    Returns:
        SplitPlan with the class sets recorded under parameters["classes"]
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidArgumentError("sharded_split needs at least one labelled sample")
    n_classes = int(n_classes if n_classes is not None else labels.max() + 1)
    if n_models < 1 or n_models > n_classes:
        raise InvalidArgumentError(f"n_models must be in [1, {n_classes}], got {n_models}")

    rng = np.random.default_rng(seed)
    class_sets = np.array_split(rng.permutation(n_classes), n_models)
    indices = [np.flatnonzero(np.isin(labels, classes)) for classes in class_sets]
    plan = SplitPlan(
        "sharded", seed,
        {"n_models": n_models, "n_classes": n_classes,
         "classes": [sorted(int(c) for c in classes) for classes in class_sets]},
        indices,
    )
    logger.info("Sharded split: %d models, classes %s", n_models, plan.parameters["classes"])
    return plan


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(shape))
    if len(data) - header != size:
        raise IdxFormatError(f"{path}: expected {size} payload bytes for shape {shape}, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             n_classes: int = 10) -> Dataset:
    """
    Load an IDX image/label pair (optionally gzipped) as a flat dataset.

    Pixels are scaled to [0, 1].
    """
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logger.info("Loaded %d IDX images of shape %s", images.shape[0], images.shape[1:])
    return Dataset(features, labels.astype(np.int64), n_classes)


def synthetic_blobs(n_classes: int, dim: int, per_class: int, spread: float = 1.0,
                    seed: int = 0, center_scale: float = 4.0) -> Dataset:
    """
    Gaussian clusters around seeded random centers, exactly per_class samples each.

    Args:
        n_classes: Number of classes
        dim: Feature dimension
        per_class: Samples per class
        spread: Standard deviation around each center
        seed: Seed for centers and noise
        center_scale: Standard deviation of the center draw
    """
    if n_classes < 1 or dim < 1 or per_class < 1:
        raise InvalidArgumentError("n_classes, dim and per_class must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    features = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], n_classes)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0):
    """Seeded random split into (train, test)."""
    if not 0 < test_fraction < 1:
        raise InvalidArgumentError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def sample_rows(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Seeded draw of n rows without replacement (all rows when n >= len)."""
    if n >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return dataset.subset(idx)
