import numpy as np
import pandas as pd
import pytest

from core.errors import ConfigError, DivergenceError
from core.network import mlp
from core.training import (TrainConfig, cross_entropy, evaluate, evaluate_logits, finetune, learning_rate_at,
                           make_optimizer, train, train_logged)


def test_schedule_warmup_then_cosine():
    cfg = TrainConfig(lr=1e-3, min_lr=1e-5, warmup_epochs=5, epochs=30)
    assert learning_rate_at(0, cfg) == pytest.approx(2e-4)
    assert learning_rate_at(4, cfg) == pytest.approx(1e-3)
    assert learning_rate_at(5, cfg) == pytest.approx(1e-3)
    rates = [learning_rate_at(e, cfg) for e in range(5, 30)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] > 1e-5
    assert learning_rate_at(30, cfg) == pytest.approx(1e-5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"lr": 0.1, "nesterov": True})
    assert TrainConfig.from_mapping({"lr": 0.1}).lr == 0.1
    with pytest.raises(ConfigError):
        make_optimizer("lbfgs", 0.1)


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_cross_entropy_gradient(rng, smoothing):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    _, grad = cross_entropy(logits, labels, smoothing)
    h = 1e-6
    for i, j in [(0, 0), (1, 2), (3, 1)]:
        E = np.zeros_like(logits)
        E[i, j] = h
        numeric = (cross_entropy(logits + E, labels, smoothing)[0]
                   - cross_entropy(logits - E, labels, smoothing)[0]) / (2 * h)
        assert numeric == pytest.approx(grad[i, j], rel=1e-5, abs=1e-9)


def test_argmax_ties_go_to_lowest_class():
    accuracy, _ = evaluate_logits(np.zeros((2, 3)), np.array([0, 1]))
    assert accuracy == 0.5


def test_training_reduces_loss_and_writes_log(blobs, tmp_path):
    cfg = TrainConfig(lr=1e-2, epochs=10, batch_size=32, warmup_epochs=1, seed=2)
    model, log = train_logged(mlp(6, [12], 4, seed=0), blobs, cfg, val_dataset=blobs)
    assert list(log.columns) == ["epoch", "lr", "train_loss", "train_acc", "val_acc"]
    assert log["train_loss"].iloc[-1] < log["train_loss"].iloc[0]
    assert evaluate(model, blobs)[0] > 0.8

    train(mlp(6, [12], 4, seed=0), blobs, cfg, log_path=tmp_path / "log.csv")
    assert len(pd.read_csv(tmp_path / "log.csv")) == 10


def test_training_is_deterministic(blobs):
    cfg = TrainConfig(epochs=2, batch_size=50, seed=9)
    a = train(mlp(6, [5], 4, seed=1), blobs, cfg)
    b = train(mlp(6, [5], 4, seed=1), blobs, cfg)
    for x, y in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x, y)


def test_zero_learning_rate_leaves_model_unchanged(blobs, small_model):
    cfg = TrainConfig(optimizer="sgd", lr=0.0, min_lr=0.0, warmup_epochs=0, epochs=1)
    trained = finetune(small_model, blobs, cfg)
    for x, y in zip(trained.parameters(), small_model.parameters()):
        np.testing.assert_array_equal(x, y)


def test_non_finite_step_raises_divergence(blobs, small_model):
    cfg = TrainConfig(optimizer="sgd", lr=float("inf"), warmup_epochs=0, epochs=2, batch_size=32)
    with pytest.raises(DivergenceError) as info:
        train(small_model, blobs, cfg)
    assert info.value.epoch == 0
