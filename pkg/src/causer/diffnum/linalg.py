"""Matrix exponential and the smooth acyclicity penalty built on it."""
import numpy as np

from .. import kernels
from ..errors import DimensionError, NumericError


def as_matrix(x, name="matrix", square=False):
    """Coerce to a finite float64 2-D array, raising the package errors."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if square and a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} has non-finite entries")
    return a


def matexp(S):
    """e^S by scaling and squaring with a Taylor series cut off once a term
    drops below 1e-16 in max-norm."""
    S = as_matrix(S, "S", square=True)
    if S.shape[0] == 0:
        return np.zeros((0, 0))
    return kernels.expm(np.ascontiguousarray(S))


def dag_penalty(Wc):
    """trace(e^{Wc*Wc}) - K; zero exactly when the support of Wc is acyclic."""
    Wc = as_matrix(Wc, "Wc", square=True)
    E = matexp(Wc * Wc)
    return max(float(np.trace(E)) - Wc.shape[0], 0.0)


def dag_penalty_grad(Wc):
    Wc = as_matrix(Wc, "Wc", square=True)
    return 2.0 * matexp(Wc * Wc).T * Wc


def dag_penalty_and_grad(Wc):
    Wc = as_matrix(Wc, "Wc", square=True)
    E = matexp(Wc * Wc)
    return max(float(np.trace(E)) - Wc.shape[0], 0.0), 2.0 * E.T * Wc


def dag_penalty_many(stack):
    """Vectorised penalty over a (m, n, n) stack of matrices."""
    stack = np.ascontiguousarray(np.asarray(stack, dtype=np.float64))
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise DimensionError(f"expected (m, n, n) stack, got {stack.shape}")
    return kernels.dag_penalty_batch(stack)
