import numpy as np
import pytest

from core.errors import DivergenceError, InvalidArgumentError
from core.network import ActivationLevel, AffineLevel, postactivation_partition
from fusion.levels import (LevelTemplate, align_initialization, approximation_error, fit_level_linear,
                           gradient_fit_level, hf_linear_level, kf_gradient_level, kf_linear_level,
                           output_level_fuse, output_level_targets, perturbation_scale)
from fusion.orchestrator import assigned_representation_cost
from fusion.settings import FusionConfig


def _affine_data(rng, B=16, p=5, d=4):
    X = rng.normal(size=(B, p))
    level = AffineLevel(rng.normal(size=(d, p)), rng.normal(size=d))
    return X, level, level.apply(X)


def test_template_from_segment(small_model):
    levels = small_model.levels
    segments = postactivation_partition(levels).segments()
    first = LevelTemplate.from_segment(levels, *segments[0])
    assert first.pre == () and len(first.post) == 1
    assert first.affine is levels[0]
    with pytest.raises(InvalidArgumentError):
        LevelTemplate.from_segment(levels, 0, 3)
    with pytest.raises(InvalidArgumentError):
        LevelTemplate.from_segment(levels, 1, 2)


def test_linear_fit_reproduces_affine_targets(rng):
    X, level, Z = _affine_data(rng)
    fitted = fit_level_linear(X, Z)
    np.testing.assert_allclose(fitted.weight, level.weight, atol=1e-8)
    np.testing.assert_allclose(fitted.bias, level.bias, atol=1e-8)
    no_bias = fit_level_linear(X, X @ level.weight.T, bias=False)
    np.testing.assert_allclose(no_bias.weight, level.weight, atol=1e-8)


def test_kf_linear_with_one_cluster_per_neuron_is_exact(rng):
    X, _, Z = _affine_data(rng)
    fitted, grouping, residual = kf_linear_level(Z, np.ones(4), X, 4, FusionConfig())
    assert residual == pytest.approx(0.0, abs=1e-16)
    assert grouping.grouping_cost == pytest.approx(0.0, abs=1e-16)
    np.testing.assert_allclose(fitted.apply(X)[:, grouping.assignment], Z, atol=1e-8)


def test_kf_linear_residual_counts_out_of_span_energy(rng):
    X = rng.normal(size=(16, 2))
    Z = rng.normal(size=(16, 3))
    _, grouping, residual = kf_linear_level(Z, np.ones(3), X, 3, FusionConfig())
    assert residual > 0
    assert grouping.grouping_cost == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_kf_linear_cost_splits_into_grouping_and_residual(seed):
    rng = np.random.default_rng(seed)
    B, p, n = rng.integers(8, 30), rng.integers(1, 6), rng.integers(3, 12)
    k = int(rng.integers(1, n + 1))
    X = rng.normal(size=(B, p))
    Z = X @ rng.normal(size=(p, n)) + rng.normal(size=(B, n))
    scores = rng.uniform(0.1, 3.0, size=n)
    fitted, grouping, residual = kf_linear_level(Z, scores, X, k, FusionConfig(seed=seed))
    total = assigned_representation_cost(fitted.apply(X), Z, scores, grouping.assignment)
    assert total == pytest.approx(grouping.grouping_cost + residual, rel=1e-8)


def test_hf_linear_recovers_permuted_twin(rng):
    X, _, Z1 = _affine_data(rng, d=6)
    perm = rng.permutation(6)
    fitted, grouping, residual = hf_linear_level(Z1, np.ones(6), Z1[:, perm], np.ones(6), X,
                                                 FusionConfig(variant="hf_linear"))
    assert residual == pytest.approx(0.0, abs=1e-16)
    np.testing.assert_allclose(fitted.apply(X), Z1, atol=1e-8)
    assert grouping.assignment[:6].tolist() == list(range(6))
    np.testing.assert_array_equal(grouping.assignment[6:], perm)
    with pytest.raises(InvalidArgumentError):
        hf_linear_level(Z1, np.ones(6), Z1[:, :5], np.ones(5), X, FusionConfig(variant="hf_linear"))


def test_output_targets_use_class_proportions():
    logits = [np.ones((3, 2)), 3.0 * np.ones((3, 2))]
    grouping = output_level_targets(logits, class_counts=[[3, 0], [1, 0]])
    np.testing.assert_allclose(grouping.targets[:, 0], 1.5)
    np.testing.assert_allclose(grouping.targets[:, 1], 2.0)
    assert grouping.assignment.tolist() == [0, 1, 0, 1]

    plain = output_level_targets(logits, class_counts=[[3, 0], [1, 0]], head_weights=False)
    np.testing.assert_allclose(plain.targets, 2.0)


def test_head_weights_ignore_output_scores():
    logits = [np.ones((3, 2)), 3.0 * np.ones((3, 2))]
    scores = [np.array([5.0, 1.0]), np.array([1.0, 5.0])]
    grouping = output_level_targets(logits, class_counts=[[4, 4], [4, 4]], head_weights=True, scores=scores)
    np.testing.assert_allclose(grouping.targets, 2.0)

    scored = output_level_targets(logits, class_counts=[[4, 4], [4, 4]], head_weights=False, scores=scores)
    np.testing.assert_allclose(scored.targets[:, 0], 8.0 / 6.0)
    np.testing.assert_allclose(scored.targets[:, 1], 16.0 / 6.0)


def test_output_level_fuse_fits_the_mean_logits(rng):
    H = rng.normal(size=(20, 5))
    heads = [AffineLevel(rng.normal(size=(3, 5)), rng.normal(size=3)) for _ in range(2)]
    logits = [head.apply(H) for head in heads]
    level, grouping = output_level_fuse(logits, H, class_counts=[[2, 2, 2], [2, 2, 2]])
    mean = 0.5 * (logits[0] + logits[1])
    np.testing.assert_allclose(grouping.targets, mean, atol=1e-12)
    np.testing.assert_allclose(level.apply(H), mean, atol=1e-8)
    np.testing.assert_allclose(level.weight, 0.5 * (heads[0].weight + heads[1].weight), atol=1e-8)


def test_align_initialization_recovers_permutation(rng):
    X, level, Z = _affine_data(rng)
    perm = np.array([2, 0, 3, 1])
    init, alignment = align_initialization(level, Z, Z[:, perm], np.arange(5), rng)
    assert alignment.tolist() == perm.tolist()
    np.testing.assert_allclose(init.apply(X), Z[:, perm], atol=1e-12)

    he, none = align_initialization(level, Z, Z[:, :3], np.arange(5), rng)
    assert none is None and he.weight.shape == (3, 5)


def test_gradient_fit_matches_closed_form(rng):
    X = rng.normal(size=(64, 3))
    T = X @ rng.normal(size=(3, 2)) + rng.normal(size=2) + 0.1 * rng.normal(size=(64, 2))
    cfg = FusionConfig(variant="kf_gradient", val_split=0.0, epsilon=0.0, patience=1000,
                       weight_decay=0.0, batch_size=64)
    template = LevelTemplate((), AffineLevel(np.zeros((2, 3)), np.zeros(2)), ())
    fitted = gradient_fit_level(X, T, template, template.affine, "sgd", 0.5, 500, cfg, rng)
    closed = fit_level_linear(X, T)
    np.testing.assert_allclose(fitted.weight, closed.weight, atol=1e-6)
    np.testing.assert_allclose(fitted.bias, closed.bias, atol=1e-6)


def test_kf_gradient_level_reaches_the_least_squares_objective(rng):
    X = rng.normal(size=(64, 3))
    base = X @ rng.normal(size=(3, 4)) + rng.normal(size=4)
    Z = np.hstack([base + 0.1 * rng.normal(size=base.shape), base + 0.1 * rng.normal(size=base.shape)])
    scores = rng.uniform(0.5, 2.0, size=8)
    template = LevelTemplate((), AffineLevel(np.zeros((4, 3)), np.zeros(4)), ())
    cfg = FusionConfig(variant="kf_gradient", optimizer="sgd", lr=0.5, epochs=500, val_split=0.0, epsilon=0.0,
                       patience=1000, weight_decay=0.0, batch_size=64)
    fitted, grouping, _ = kf_gradient_level(Z, scores, X, template, 4, cfg, rng, prev_alignment=np.arange(3))
    optimum = approximation_error(fit_level_linear(X, grouping.targets).apply(X), grouping, scores)
    assert optimum > 0
    assert approximation_error(fitted.apply(X), grouping, scores) == pytest.approx(optimum, rel=1e-3)


def test_initial_perturbation_scales_with_the_weights(rng):
    init = AffineLevel(50.0 * rng.normal(size=(200, 100)), np.zeros(200))
    template = LevelTemplate((), init, ())
    X = rng.normal(size=(10, 100))
    cfg = FusionConfig(variant="kf_gradient", epsilon=0.1, val_split=0.0)
    perturbed = gradient_fit_level(X, np.zeros((10, 200)), template, init, "sgd", 1e-3, 0, cfg, rng)
    noise = perturbed.weight - init.weight
    assert np.std(noise) == pytest.approx(0.1 * np.std(init.weight), rel=0.05)
    assert perturbation_scale(np.full((3, 3), 2.0)) == 1.0


def test_gradient_level_keeps_exact_initialization(rng):
    X, level, Z = _affine_data(rng, B=40)
    Z = np.maximum(Z, 0.0)
    template = LevelTemplate((), level, (ActivationLevel("relu"),))
    cfg = FusionConfig(variant="kf_gradient", epsilon=0.0, epochs=5, patience=2)
    fitted, grouping, alignment = kf_gradient_level(np.hstack([Z, Z]), np.ones(8), X, template, 4, cfg, rng,
                                                    init_z=Z, prev_alignment=np.arange(5))
    assert sorted(alignment.tolist()) == [0, 1, 2, 3]
    np.testing.assert_allclose(template.level_output(fitted, X), grouping.targets, atol=1e-8)


def test_gradient_fit_raises_on_divergence(rng):
    X, level, Z = _affine_data(rng)
    cfg = FusionConfig(variant="kf_gradient", epsilon=0.0)
    template = LevelTemplate((), level, ())
    with pytest.raises(DivergenceError):
        gradient_fit_level(X, Z + 1.0, template, level, "sgd", float("inf"), 3, cfg, rng)
