"""
Dense matrix kernel: SVD pseudoinverse, weighted least squares and
column-space projection.
"""
import numpy as np
from numpy.typing import ArrayLike

from core.errors import InvalidArgumentError, NumericsError, ShapeMismatchError
from utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_RCOND = 1e-10


def as_matrix(data: ArrayLike, name: str = "matrix") -> np.ndarray:
    """
    Convert input to a finite 2-D float64 array.

    Args:
        data: Anything numpy can turn into a 2-D array
        name: Name used in diagnostics

    Returns:
        A float64 ndarray with ndim == 2

    Raises:
        ShapeMismatchError: If the input is not 2-D
        InvalidArgumentError: If any entry is NaN or infinite
    """
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return matrix


def diag_weights(data: ArrayLike, length: int, name: str = "weights") -> np.ndarray:
    """Validate a nonnegative weight vector with at least one positive entry."""
    weights = np.asarray(data, dtype=np.float64).reshape(-1)
    if weights.shape[0] != length:
        raise ShapeMismatchError(f"{name} has length {weights.shape[0]}, expected {length}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidArgumentError(f"{name} must be finite and nonnegative")
    if not np.any(weights > 0):
        raise InvalidArgumentError(f"{name} must contain a positive entry")
    return weights


def _svd(A: np.ndarray):
    try:
        return np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as e:
        logger.error("SVD failed for %dx%d matrix: %s", A.shape[0], A.shape[1], str(e))
        raise NumericsError(f"SVD did not converge for matrix of shape {A.shape}") from e


def pseudoinverse(A: ArrayLike, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """
    Moore-Penrose pseudoinverse via SVD.

    Singular values below rcond * sigma_max are treated as zero.

    Args:
        A: Finite m x n matrix
        rcond: Relative cutoff for small singular values

    Returns:
        n x m pseudoinverse
    """
    A = as_matrix(A, "A")
    if A.size == 0:
        return np.zeros((A.shape[1], A.shape[0]))

    U, s, Vt = _svd(A)
    s_inv = np.zeros_like(s)
    if s[0] > 0:
        keep = s > rcond * s[0]
        s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def weighted_least_squares(X: ArrayLike, S: ArrayLike, T: ArrayLike,
                           rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """
    Minimum-norm minimizer of sum_m S_m ||X_m W - T_m||^2.

    Rows of X and T are scaled by sqrt(S) and the problem is solved as an
    unweighted min-norm least squares, which equals (X^T S X)^+ X^T S T.

    Args:
        X: B x p design matrix
        S: Length-B nonnegative row weights
        T: B x k targets

    Returns:
        p x k weight matrix
    """
    X = as_matrix(X, "X")
    T = as_matrix(T, "T")
    if X.shape[0] != T.shape[0]:
        raise ShapeMismatchError(f"X has {X.shape[0]} rows but T has {T.shape[0]}")
    weights = diag_weights(S, X.shape[0], "S")

    root = np.sqrt(weights)[:, None]
    return pseudoinverse(root * X, rcond) @ (root * T)


def weighted_objective(X: np.ndarray, S: np.ndarray, T: np.ndarray, W: np.ndarray) -> float:
    """Value of sum_m S_m ||X_m W - T_m||^2."""
    residual = X @ W - T
    return float(np.sum(np.asarray(S)[:, None] * residual ** 2))


def project_columnspace(X: ArrayLike, Z: ArrayLike, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """
    Project the columns of Z onto the column space of X.

    Computes P Z with P = X (X^T X)^+ X^T, evaluated as X (X^+ Z).

    Args:
        X: B x p matrix spanning the target subspace
        Z: B x m matrix of vectors to project

    Returns:
        B x m projected matrix
    """
    X = as_matrix(X, "X")
    Z = as_matrix(Z, "Z")
    if X.shape[0] != Z.shape[0]:
        raise ShapeMismatchError(f"X has {X.shape[0]} rows but Z has {Z.shape[0]}")
    return X @ (pseudoinverse(X, rcond) @ Z)


def projection_matrix(X: ArrayLike, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Explicit B x B orthogonal projector onto the column space of X."""
    X = as_matrix(X, "X")
    return X @ pseudoinverse(X, rcond)


def with_bias_column(X: ArrayLike) -> np.ndarray:
    """Append a column of ones."""
    X = as_matrix(X, "X")
    return np.hstack([X, np.ones((X.shape[0], 1))])
