"""Small input-checking helpers built on sklearn's array validation."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import InvalidInputError


def as_square(A, name="A"):
    try:
        A = check_array(A, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    if A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {A.shape}")
    return A


def as_projection(P, n=None, name="P0", tol=1e-10):
    P = as_square(P, name)
    if n is not None and P.shape[0] != n:
        raise InvalidInputError(f"{name} has shape {P.shape}, expected ({n}, {n})")
    scale = max(1.0, np.linalg.norm(P, 2))
    if np.linalg.norm(P - P.T, 2) > tol * scale or np.linalg.norm(P @ P - P, 2) > tol * scale:
        raise InvalidInputError(f"{name} is not a symmetric idempotent matrix")
    return P


def as_vector(x, n=None, name="x"):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if n is not None and x.shape[0] != n:
        raise InvalidInputError(f"{name} has length {x.shape[0]}, expected {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return x


def check_positive(value, name):
    if not value > 0:
        raise InvalidInputError(f"{name} must be positive, got {value}")
    return float(value)
