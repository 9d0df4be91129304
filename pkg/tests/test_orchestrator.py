import json

import numpy as np
import pytest

from core.errors import FusionNotApplicableError, InvalidArgumentError, ShapeMismatchError
from core.network import forward, forward_collect, mlp
from core.training import evaluate
from fusion import FusionConfig, FusionOrchestrator, GRADIENT_PRESETS, fuse, hungarian, representation_cost
from fusion.attribution import compute_scores
from fusion.grouping import hf_cost_matrix


@pytest.fixture
def fusion_x(rng):
    return rng.normal(size=(50, 6))


def _uniform(models):
    return [compute_scores("uniform", m, None, None) for m in models]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("variant", ["hf_linear", "kf_linear"])
def test_self_fusion_reproduces_the_model(seed, variant):
    model = mlp(6, [8, 7], 4, seed=seed)
    X = np.random.default_rng(seed).normal(size=(50, 6))
    fused, report = fuse([model, model], X, cfg=FusionConfig(variant=variant, seed=seed))
    np.testing.assert_allclose(forward(fused, X), forward(model, X), atol=1e-6)
    assert [lvl.width for lvl in report.levels] == [8, 7, 4]
    for lvl in report.levels:
        assert lvl.representation_cost < 1e-6
        assert lvl.approximation_error < 1e-6


@pytest.mark.parametrize("boundary", ["preactivation", "postactivation"])
def test_gradient_self_fusion_without_noise(small_model, fusion_x, boundary):
    cfg = FusionConfig(variant="kf_gradient", boundary=boundary, epsilon=0.0, epochs=3, last_epochs=3,
                       patience=1)
    fused, _ = fuse([small_model, small_model], fusion_x, cfg=cfg)
    np.testing.assert_allclose(forward(fused, fusion_x), forward(small_model, fusion_x), atol=1e-6)


@pytest.mark.parametrize("preset", sorted(GRADIENT_PRESETS))
def test_gradient_presets_recover_base_accuracy(noniid_pair, preset):
    models, train_set, test_set, counts = noniid_pair
    cfg = FusionConfig.from_mapping({"preset": preset})
    fused, report = FusionOrchestrator(cfg).fuse(models, train_set.features, train_set.labels,
                                                 class_counts=counts, eval_dataset=test_set)
    best = max(evaluate(m, test_set)[0] for m in models)
    assert report.accuracy == pytest.approx(evaluate(fused, test_set)[0])
    assert report.accuracy >= best - 0.05


def test_single_model_fusion_is_identity(small_model, fusion_x):
    fused, _ = fuse([small_model], fusion_x)
    np.testing.assert_allclose(forward(fused, fusion_x), forward(small_model, fusion_x), atol=1e-6)


def test_hungarian_fusion_undoes_a_permutation(small_model, fusion_x, rng, permuted):
    perm = rng.permutation(8)
    twin = permuted(small_model, 0, perm)
    za = forward_collect(small_model, fusion_x)[0]
    zb = forward_collect(twin, fusion_x)[0]
    s = np.ones(8)
    np.testing.assert_array_equal(hungarian(hf_cost_matrix(za, s, zb, s)), np.argsort(perm))

    fused, report = fuse([small_model, twin], fusion_x, cfg=FusionConfig(variant="hf_linear"))
    np.testing.assert_allclose(forward(fused, fusion_x), forward(small_model, fusion_x), atol=1e-6)
    assert report.levels[0].grouping_cost < 1e-8


def test_hungarian_fusion_is_not_applicable(small_model, fusion_x):
    cfg = FusionConfig(variant="hf_linear")
    with pytest.raises(FusionNotApplicableError):
        fuse([small_model] * 3, fusion_x, cfg=cfg)
    with pytest.raises(FusionNotApplicableError):
        fuse([small_model, mlp(6, [9, 7], 4, seed=1)], fusion_x, cfg=cfg)
    with pytest.raises(FusionNotApplicableError):
        fuse([small_model, small_model], fusion_x, cfg=FusionConfig(variant="hf_linear", widths=(6, 7)))


def test_model_checks(small_model, fusion_x):
    with pytest.raises(InvalidArgumentError):
        fuse([small_model, mlp(6, [8], 4, seed=2)], fusion_x)
    with pytest.raises(ShapeMismatchError):
        fuse([small_model, mlp(6, [8, 7], 5, seed=2)], fusion_x)
    with pytest.raises(ShapeMismatchError):
        fuse([small_model], fusion_x[:, :5])
    with pytest.raises(InvalidArgumentError):
        fuse([], fusion_x)
    with pytest.raises(InvalidArgumentError):
        fuse([small_model], fusion_x, cfg=FusionConfig(widths=(5, 4, 3)))
    with pytest.raises(ShapeMismatchError):
        fuse([small_model], fusion_x, scores=[[np.ones(8)]])


def test_kmeans_fusion_to_narrower_widths(small_model, fusion_x):
    other = mlp(6, [10, 5], 4, seed=3)
    orchestrator = FusionOrchestrator(FusionConfig(widths=(6, 5)))
    fused, report = orchestrator.fuse([small_model, other], fusion_x)
    assert fused.widths() == [6, 5, 4]
    assert fused.partition.boundaries == (0, 2, 4)
    frame = orchestrator.cluster_frame()
    assert len(frame) == (8 + 10) + (7 + 5) + (4 + 4)
    assert set(frame["model_id"]) == {"m0", "m1"}
    assert frame.groupby("level")["cluster"].max().tolist() == [5, 4, 3]
    payload = json.loads(report.to_json())
    assert payload["widths"] == [6, 5, 4]
    assert len(payload["levels"]) == 3


def test_attribution_scores_without_labels(small_model, fusion_x):
    cfg = FusionConfig(score_kind="conductance", attribution_steps=8)
    fused, report = fuse([small_model, mlp(6, [8, 7], 4, seed=5)], fusion_x, cfg=cfg)
    assert report.config["score_kind"] == "conductance"
    assert np.all(np.isfinite(forward(fused, fusion_x)))


def test_report_accuracy_with_eval_dataset(trained_model, blobs):
    fused, report = fuse([trained_model, trained_model], blobs.features[:100], eval_dataset=blobs)
    assert report.accuracy is not None and 0.0 <= report.accuracy <= 1.0
    assert report.loss is not None


def test_representation_cost_properties(small_model, fusion_x, rng, permuted):
    scores = _uniform([small_model])
    for level in range(3):
        assert representation_cost(small_model, [small_model], fusion_x, scores, level) == pytest.approx(0.0)

    other = mlp(6, [8, 7], 4, seed=9)
    bases = [small_model, other]
    fused, _ = fuse(bases, fusion_x)
    cost = representation_cost(fused, bases, fusion_x, _uniform(bases), 0)
    assert cost >= 0
    moved = permuted(fused, 0, rng.permutation(8))
    assert representation_cost(moved, bases, fusion_x, _uniform(bases), 0) == pytest.approx(cost, rel=1e-10)
