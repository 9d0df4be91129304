import numpy as np
import pytest
from scipy.special import softmax

from core.errors import ShapeMismatchError
from core.network import forward, mlp
from fusion import ensemble_predict, last_layer_kd, vanilla_average


def _kl(teacher, logits):
    student = softmax(logits, axis=1)
    return float(np.mean(np.sum(teacher * (np.log(teacher) - np.log(student)), axis=1)))


def test_vanilla_average_of_identical_models(small_model, rng):
    averaged = vanilla_average([small_model, small_model, small_model])
    X = rng.normal(size=(5, 6))
    np.testing.assert_allclose(forward(averaged, X), forward(small_model, X), atol=1e-12)


def test_vanilla_average_is_parameter_mean(small_model):
    other = mlp(6, [8, 7], 4, seed=99)
    averaged = vanilla_average([small_model, other])
    for a, b, c in zip(small_model.parameters(), other.parameters(), averaged.parameters()):
        np.testing.assert_allclose(c, (a + b) / 2)


def test_vanilla_average_with_one_hot_scores_picks_a_model(small_model):
    other = mlp(6, [8, 7], 4, seed=99)
    widths = small_model.widths()
    ones = [np.ones(w) for w in widths]
    zeros = [np.zeros(w) for w in widths]
    averaged = vanilla_average([small_model, other], scores=[zeros, ones])
    for a, b in zip(averaged.parameters(), other.parameters()):
        np.testing.assert_array_equal(a, b)
    # neurons nobody scores fall back to equal weights
    fallback = vanilla_average([small_model, other], scores=[zeros, zeros])
    for a, b, c in zip(small_model.parameters(), other.parameters(), fallback.parameters()):
        np.testing.assert_allclose(c, (a + b) / 2)


def test_vanilla_average_rejects_mismatched_architectures(small_model):
    with pytest.raises(ShapeMismatchError):
        vanilla_average([small_model, mlp(6, [9, 7], 4)])
    with pytest.raises(ShapeMismatchError):
        vanilla_average([small_model, small_model], scores=[[np.ones(3)] * 3, [np.ones(3)] * 3])


def test_ensemble_is_mean_softmax(small_model, rng):
    other = mlp(6, [8, 7], 4, seed=4)
    X = rng.normal(size=(7, 6))
    probs = ensemble_predict([small_model, other], X)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    expected = (softmax(forward(small_model, X), axis=1) + softmax(forward(other, X), axis=1)) / 2
    np.testing.assert_allclose(probs, expected, atol=1e-12)


def test_distillation_fixpoint(small_model, rng):
    X = rng.normal(size=(20, 6))
    student = last_layer_kd([small_model], small_model, X, epochs=3, lr=1e-3, optimizer="sgd")
    for a, b in zip(student.parameters(), small_model.parameters()):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_distillation_trains_only_the_head(small_model, rng):
    other = mlp(6, [8, 7], 4, seed=7)
    X = rng.normal(size=(64, 6))
    teacher = ensemble_predict([small_model, other], X)
    student = last_layer_kd([small_model, other], small_model, X, epochs=40, lr=1e-2, seed=1)
    assert _kl(teacher, forward(student, X)) < _kl(teacher, forward(small_model, X))
    before, after = small_model.parameters(), student.parameters()
    for a, b in zip(before[:-2], after[:-2]):
        np.testing.assert_array_equal(a, b)
    assert not np.allclose(before[-2], after[-2])


def test_distillation_checks_class_count(small_model, rng):
    with pytest.raises(ShapeMismatchError):
        last_layer_kd([mlp(6, [8], 3)], small_model, rng.normal(size=(4, 6)), epochs=1)
