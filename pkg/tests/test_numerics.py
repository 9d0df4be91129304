import numpy as np
import pytest

from core.errors import InvalidArgumentError, ShapeMismatchError
from core.numerics import (as_matrix, project_columnspace, projection_matrix, pseudoinverse,
                           weighted_least_squares, weighted_objective, with_bias_column)


def test_pseudoinverse_matches_numpy(rng):
    A = rng.normal(size=(7, 4))
    np.testing.assert_allclose(pseudoinverse(A), np.linalg.pinv(A), atol=1e-10)


def test_pseudoinverse_rank_deficient_satisfies_penrose(rng):
    A = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    P = pseudoinverse(A)
    np.testing.assert_allclose(A @ P @ A, A, atol=1e-10)
    np.testing.assert_allclose(P @ A @ P, P, atol=1e-10)


def test_pseudoinverse_of_zero_matrix_is_zero():
    assert np.array_equal(pseudoinverse(np.zeros((3, 2))), np.zeros((2, 3)))


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ShapeMismatchError):
        as_matrix(np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        as_matrix([[1.0, np.nan]])


def test_weighted_least_squares_is_a_minimizer(rng):
    X = rng.normal(size=(20, 3))
    T = rng.normal(size=(20, 2))
    S = rng.uniform(0.1, 2.0, size=20)
    W = weighted_least_squares(X, S, T)
    best = weighted_objective(X, S, T, W)
    for _ in range(10):
        assert weighted_objective(X, S, T, W + 1e-3 * rng.normal(size=W.shape)) >= best


def test_weighted_least_squares_exact_when_target_in_span(rng):
    X = rng.normal(size=(10, 3))
    W_true = rng.normal(size=(3, 2))
    W = weighted_least_squares(X, np.ones(10), X @ W_true)
    np.testing.assert_allclose(W, W_true, atol=1e-10)


def test_zero_weight_rows_are_ignored(rng):
    X = rng.normal(size=(8, 2))
    T = X @ np.array([[1.0], [2.0]])
    T[0] += 100.0
    S = np.ones(8)
    S[0] = 0.0
    np.testing.assert_allclose(weighted_least_squares(X, S, T), [[1.0], [2.0]], atol=1e-10)


def test_weighted_least_squares_rejects_shape_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        weighted_least_squares(rng.normal(size=(4, 2)), np.ones(4), rng.normal(size=(5, 1)))
    with pytest.raises(InvalidArgumentError):
        weighted_least_squares(rng.normal(size=(4, 2)), np.zeros(4), rng.normal(size=(4, 1)))


def test_projection_is_idempotent_and_orthogonal(rng):
    X = rng.normal(size=(9, 3))
    Z = rng.normal(size=(9, 4))
    PZ = project_columnspace(X, Z)
    np.testing.assert_allclose(project_columnspace(X, PZ), PZ, atol=1e-10)
    np.testing.assert_allclose(X.T @ (Z - PZ), 0.0, atol=1e-10)
    P = projection_matrix(X)
    np.testing.assert_allclose(P, P.T, atol=1e-10)
    np.testing.assert_allclose(P @ Z, PZ, atol=1e-10)


def test_bias_column_projection_of_constant_is_identity(rng):
    X = with_bias_column(rng.normal(size=(5, 2)))
    assert np.all(X[:, -1] == 1.0)
    np.testing.assert_allclose(project_columnspace(X, np.full((5, 1), 3.0)), 3.0, atol=1e-12)
