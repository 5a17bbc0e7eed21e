"""Input validation helpers used across the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_matrix(X, name="X", *, allow_1d=False) -> np.ndarray:
    """Coerce to a finite float64 2-D array (C order)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and allow_1d:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {X.shape}")
    if X.size and not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_vector(y, name="y", *, allow_nan=False) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if not allow_nan and y.size and not np.all(np.isfinite(y)):
        raise ValidationError(f"{name} contains non-finite values")
    return y


def check_labels(labels, n, name="labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ValidationError(f"{name} must be a length-{n} label vector")
    return np.asarray([str(v) for v in labels], dtype=object)


def check_same_rows(X, y, xname="X", yname="y"):
    if X.shape[0] != len(y):
        raise ValidationError(
            f"{xname} has {X.shape[0]} rows but {yname} has {len(y)} entries"
        )


def check_nonneg(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a nonnegative finite number, got {value!r}")
    return float(value)


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def as_seed_path(seed) -> tuple:
    """Flatten an int or (possibly nested) tuple of ints into a seed path."""
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    out = []
    for part in seed:
        out.extend(as_seed_path(part))
    return tuple(out)


def seeded_rng(*path) -> np.random.Generator:
    """Deterministic child stream for a tuple of integer keys.

    All randomness in the package flows through this helper so that a single
    run seed splits into independent, schedule-invariant streams.
    """
    flat = []
    for part in path:
        flat.extend(as_seed_path(part))
    return np.random.default_rng(np.random.SeedSequence(flat))
