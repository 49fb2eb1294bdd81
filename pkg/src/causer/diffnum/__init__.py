"""Dense float64 math with reverse-mode differentiation."""
from . import tape as ops
from .linalg import (
    as_matrix,
    dag_penalty,
    dag_penalty_and_grad,
    dag_penalty_grad,
    dag_penalty_many,
    matexp,
)
from .tape import Tape, Var, backward, value

__all__ = [
    "Tape",
    "Var",
    "as_matrix",
    "backward",
    "dag_penalty",
    "dag_penalty_and_grad",
    "dag_penalty_grad",
    "dag_penalty_many",
    "matexp",
    "ops",
    "value",
]
