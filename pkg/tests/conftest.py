import numpy as np
import pytest

from core.data import dirichlet_split, synthetic_blobs, train_test_split
from core.network import AffineLevel, ModelSpec, mlp
from core.training import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    """Small, well separated 4-class problem."""
    return synthetic_blobs(n_classes=4, dim=6, per_class=60, spread=0.7, seed=3)


@pytest.fixture
def small_model():
    return mlp(6, [8, 7], 4, seed=11)


@pytest.fixture(scope="session")
def trained_model():
    data = synthetic_blobs(n_classes=4, dim=6, per_class=60, spread=0.7, seed=3)
    cfg = TrainConfig(lr=1e-2, epochs=8, batch_size=32, warmup_epochs=1, seed=5)
    return train(mlp(6, [10, 8], 4, seed=21), data, cfg)


@pytest.fixture(scope="session")
def noniid_pair():
    """Two models from different seeds on a Dirichlet split: (models, train, test, class counts)."""
    data = synthetic_blobs(n_classes=4, dim=6, per_class=100, spread=0.7, seed=8)
    train_set, test_set = train_test_split(data, 0.25, seed=8)
    plan = dirichlet_split(train_set.labels, 2, alpha_min=1.0, min_max_ratio=0.2, seed=8)
    models = []
    for i, idx in enumerate(plan.indices):
        cfg = TrainConfig(lr=1e-2, epochs=15, batch_size=32, warmup_epochs=1, seed=40 + i)
        models.append(train(mlp(6, [16, 16], 4, seed=40 + i), train_set.subset(idx), cfg))
    counts = [train_set.subset(idx).class_counts() for idx in plan.indices]
    return models, train_set, test_set, counts


def permute_hidden(model: ModelSpec, level_index: int, perm: np.ndarray) -> ModelSpec:
    """Same function, with the output neurons of one affine level reordered."""
    levels = list(model.levels)
    affine = model.affine_indices
    first, after = affine[level_index], affine[level_index + 1]
    levels[first] = AffineLevel(levels[first].weight[perm], levels[first].bias[perm])
    levels[after] = AffineLevel(levels[after].weight[:, perm], levels[after].bias)
    return ModelSpec(tuple(levels))


@pytest.fixture
def permuted():
    return permute_hidden
