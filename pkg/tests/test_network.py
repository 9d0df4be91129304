import numpy as np
import pytest

from core.errors import InvalidArgumentError, ShapeMismatchError
from core.network import (Activation, ActivationLevel, AffineLevel, LevelPartition, ModelSpec, backward,
                          backward_from, forward, forward_collect, layer_output, mlp,
                          postactivation_partition, preactivation_partition)


def test_mlp_shapes_and_partitions():
    model = mlp(5, [8, 6], 3, seed=0)
    assert model.input_dim == 5 and model.output_dim == 3
    assert model.partition.boundaries == (0, 2, 4)
    assert model.widths() == [8, 6, 3]
    assert postactivation_partition(model.levels).boundaries == (1, 3, 4)
    assert LevelPartition((1, 3, 4)).segments() == [(0, 2), (2, 4), (4, 5)]


def test_forward_collect_reads_boundaries(rng):
    model = mlp(4, [6], 2, seed=1)
    X = rng.normal(size=(5, 4))
    bundle = forward_collect(model, X, model_id="a")
    assert bundle.widths == [6, 2]
    np.testing.assert_array_equal(bundle[-1], forward(model, X))
    np.testing.assert_array_equal(bundle[0], X @ model.levels[0].weight.T + model.levels[0].bias)

    post = forward_collect(model, X, postactivation_partition(model.levels))
    assert np.all(post[0] >= 0)


def test_model_validation():
    with pytest.raises(ShapeMismatchError):
        ModelSpec((AffineLevel(np.ones((3, 2)), np.zeros(3)), AffineLevel(np.ones((2, 4)), np.zeros(2))))
    with pytest.raises(InvalidArgumentError):
        ModelSpec((AffineLevel(np.ones((3, 2)), np.zeros(3)), ActivationLevel(Activation.RELU)))
    with pytest.raises(InvalidArgumentError):
        ModelSpec((ActivationLevel("relu"), AffineLevel(np.ones((3, 2)), np.zeros(3))))
    with pytest.raises(InvalidArgumentError):
        LevelPartition((2, 1))


def test_forward_rejects_wrong_width(rng):
    with pytest.raises(ShapeMismatchError):
        forward_collect(mlp(4, [3], 2), rng.normal(size=(2, 5)))


def test_parameters_round_trip():
    model = mlp(3, [4], 2, seed=2)
    params = model.parameters()
    params[0][0, 0] = 42.0
    assert model.levels[0].weight[0, 0] != 42.0
    assert model.with_parameters(params).levels[0].weight[0, 0] == 42.0


def _scalar(model, X, upstream):
    return float(np.sum(forward(model, X) * upstream))


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 5))
    hidden = [int(w) for w in rng.integers(2, 33, size=depth - 1)] if depth > 1 else []
    model = mlp(int(rng.integers(2, 8)), hidden, int(rng.integers(2, 6)), seed=seed)
    X = rng.normal(size=(3, model.input_dim))
    upstream = rng.normal(size=(3, model.output_dim))
    grads = backward(model, X, upstream).flat_params()

    params = model.parameters()
    h = 1e-6
    for p_index, (param, grad) in enumerate(zip(params, grads)):
        flat = param.reshape(-1)
        for entry in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            plus, minus = [p.copy() for p in params], [p.copy() for p in params]
            plus[p_index].reshape(-1)[entry] += h
            minus[p_index].reshape(-1)[entry] -= h
            numeric = (_scalar(model.with_parameters(plus), X, upstream)
                       - _scalar(model.with_parameters(minus), X, upstream)) / (2 * h)
            analytic = grad.reshape(-1)[entry]
            assert abs(numeric - analytic) <= 1e-5 * max(1.0, abs(analytic))


def test_input_and_level_gradients(rng):
    model = mlp(4, [5, 5], 3, seed=3)
    X = rng.normal(size=(2, 4))
    upstream = rng.normal(size=(2, 3))
    grads = backward(model, X, upstream)
    h = 1e-6
    E = np.zeros_like(X)
    E[1, 2] = h
    numeric = (_scalar(model, X + E, upstream) - _scalar(model, X - E, upstream)) / (2 * h)
    assert numeric == pytest.approx(grads.input_grad[1, 2], rel=1e-5, abs=1e-8)

    layer = model.partition.boundaries[1]
    H = layer_output(model, X, layer)
    np.testing.assert_allclose(backward_from(model, layer, H, upstream), grads.level_grads[1], atol=1e-12)


def test_preactivation_partition_of_single_affine():
    model = ModelSpec((AffineLevel(np.eye(2), np.zeros(2)),))
    assert preactivation_partition(model.levels).boundaries == (0,)
    assert layer_output(model, np.ones((1, 2)), -1).shape == (1, 2)
