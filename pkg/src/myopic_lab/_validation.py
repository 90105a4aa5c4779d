"""Small input-validation helpers used by every module."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError

__all__ = [
    "as_vector",
    "as_matrix",
    "check_positive",
    "check_nonnegative",
    "check_probability_level",
    "check_finite",
    "check_psd",
    "check_paired",
]


def as_vector(x, n: int | None = None, name: str = "value") -> np.ndarray:
    """Return ``x`` as a 1-D float array, broadcasting scalars to length ``n``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if n is None:
            return arr.reshape(1)
        return np.full(n, float(arr))
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be a vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ConfigurationError(f"{name} must have length {n}, got {arr.shape[0]}")
    return arr


def as_matrix(x, n: int, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as an ``n x n`` float array; scalars become multiples of I."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ConfigurationError(f"{name} diagonal must have length {n}")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ConfigurationError(f"{name} must be {n}x{n}, got {arr.shape}")
    return arr


def check_positive(value, name: str) -> float:
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ConfigurationError(f"{name} must be positive and finite, got {value}")
    return value


def check_nonnegative(value, name: str):
    arr = np.asarray(value, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ConfigurationError(f"{name} must be nonnegative")
    return value


def check_probability_level(alpha, name: str = "alpha") -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {alpha}")
    return alpha


def check_finite(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return arr


def check_psd(mat: np.ndarray, name: str, strict: bool = False, tol: float = 1e-12) -> float:
    """Check symmetry and (semi)definiteness; return the smallest eigenvalue."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigurationError(f"{name} must be square")
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    if not np.allclose(mat, mat.T, atol=1e-12 * scale):
        raise ConfigurationError(f"{name} must be symmetric")
    lam_min = float(np.linalg.eigvalsh(mat).min()) if mat.size else 0.0
    if strict and lam_min <= tol * scale:
        raise ConfigurationError(f"{name} must be positive definite (min eigenvalue {lam_min:.3g})")
    if not strict and lam_min < -tol * scale:
        raise ConfigurationError(f"{name} must be positive semidefinite (min eigenvalue {lam_min:.3g})")
    return lam_min


def check_paired(a, b, name_a: str = "a", name_b: str = "b"):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(
            f"{name_a} and {name_b} must be paired samples of equal shape, got {a.shape} vs {b.shape}"
        )
    return a, b
