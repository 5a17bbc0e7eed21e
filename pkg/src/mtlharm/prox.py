"""Proximal operators for the multitask penalties.

Each operator solves  argmin_x  0.5 * ||x - v||^2 + t * g(x)  in closed form,
where g is the matching penalty (elementwise L1, row-wise L2, row-wise Linf,
nuclear norm).  All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .exceptions import NumericalError
from .validation import check_nonneg, check_positive

__all__ = [
    "soft_threshold",
    "prox_group_l21",
    "project_l1_ball",
    "prox_linf_rows",
    "prox_nuclear",
    "thin_svd",
]


def soft_threshold(v, t):
    """Elementwise shrinkage: sign(v) * max(|v| - t, 0)."""
    t = check_nonneg(t, "t")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_group_l21(W, t):
    """Row-wise group shrinkage: each row w -> max(1 - t/||w||_2, 0) * w.

    Rows with ||w||_2 <= t become exactly zero.
    """
    t = check_nonneg(t, "t")
    W = np.asarray(W, dtype=np.float64)
    norms = np.sqrt((W * W).sum(axis=-1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > t, 1.0 - t / norms, 0.0)
    return scale * W


def project_l1_ball(v, radius):
    """Euclidean projection onto {x : ||x||_1 <= radius}, sort-based exact method.

    Returns v unchanged when it is already inside the ball.  Sorting ties are
    broken by index order; the projection itself is unique either way.
    """
    radius = check_positive(radius, "radius")
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a, kind="stable")[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    # largest k with u_k > (sum of k largest - radius) / k
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def prox_linf_rows(R, t):
    """Row-wise prox of t * ||.||_inf via the Moreau identity.

    For each row r:  prox(r) = r - project_l1_ball(r, t); rows with
    ||r||_1 <= t map to the zero row.
    """
    t = check_nonneg(t, "t")
    R = np.asarray(R, dtype=np.float64)
    if t == 0.0:
        return R.copy()
    squeeze = R.ndim == 1
    rows = np.atleast_2d(R)
    out = np.empty_like(rows)
    for j, r in enumerate(rows):
        if np.abs(r).sum() <= t:
            out[j] = 0.0
        else:
            out[j] = r - project_l1_ball(r, t)
    return out[0] if squeeze else out


def prox_nuclear(W, t):
    """Singular value shrinkage: U * max(S - t, 0) * V^T via thin SVD."""
    t = check_nonneg(t, "t")
    W = np.asarray(W, dtype=np.float64)
    U, s, V = thin_svd(W)
    return (U * np.maximum(s - t, 0.0)) @ V.T


def thin_svd(A):
    """Thin SVD: A = U @ diag(s) @ V.T with s nonnegative non-increasing.

    Backed by LAPACK; a non-converged decomposition raises NumericalError.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("thin_svd requires finite entries")
    try:
        U, s, Vh = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return U, s, Vh.T
