"""Partial least squares and PLS-based batch domain adaptation.

The adapter fits a PLS regression of a feature block onto a coded batch
response (optionally augmented with standardized age), then removes the
batch-predictive latent subspace by deflating the block against the fitted
score directions.  The stored weights let the same deflation apply to held-out
rows.  A two-stage stacked regressor (per-block kernel ridge base learners
combined out-of-fold by an elastic net) mirrors the per-region prediction
strategy the adaptation was designed for.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.kernel_ridge import KernelRidge

from .exceptions import LoadError, NumericalError, ValidationError
from .solvers import ElasticNetRegressor, default_alpha_grid, elastic_net_path
from .validation import check_labels, check_matrix, check_vector, seeded_rng

__all__ = [
    "PlsRegression",
    "PlsDomainAdapter",
    "RegionBlocks",
    "load_block_map",
    "single_block",
    "adapt_blocks",
    "StackedBlockRegressor",
    "PLS_COMPONENT_CANDIDATES",
]

PLS_COMPONENT_CANDIDATES = (5, 10, 15, 17, 20, 25)


class PlsRegression(BaseEstimator):
    """PLS regression via NIPALS with X and Y deflation.

    Score vectors are mutually orthogonal; x_rotations_ maps undeflated
    centered X directly to scores.  Works for single- and multi-column Y.
    """

    def __init__(self, n_components=2, max_iter=500, tol=1e-10):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, Y):
        X = check_matrix(X, "X")
        Y = check_matrix(Y, "Y", allow_1d=True)
        n, m = X.shape
        if Y.shape[0] != n:
            raise ValidationError("X and Y must have the same number of rows")
        K = int(self.n_components)
        if K < 1:
            raise ValidationError("n_components must be >= 1")
        if K > min(n - 1, m):
            raise ValidationError(
                f"n_components={K} exceeds min(n-1, n_features)={min(n - 1, m)}"
            )
        if np.all(Y.std(axis=0) == 0.0):
            raise ValidationError("Y has zero variance; nothing to regress on")
        self.x_mean_ = X.mean(axis=0)
        self.y_mean_ = Y.mean(axis=0)
        Xc = X - self.x_mean_
        Yc = Y - self.y_mean_
        W = np.empty((m, K))
        P = np.empty((m, K))
        C = np.empty((Y.shape[1], K))
        T = np.empty((n, K))
        for k in range(K):
            u = Yc[:, int(np.argmax(Yc.var(axis=0)))]
            if float(u @ u) <= 1e-300:
                raise NumericalError(
                    f"response exhausted after {k} component(s); reduce n_components"
                )
            w = np.zeros(m)
            for _ in range(int(self.max_iter)):
                w_new = Xc.T @ u / float(u @ u)
                nw = np.linalg.norm(w_new)
                if nw <= 1e-300:
                    raise NumericalError(
                        f"X block exhausted after {k} component(s); reduce n_components"
                    )
                w_new /= nw
                t = Xc @ w_new
                tt = float(t @ t)
                if tt <= 1e-300:
                    raise NumericalError(
                        f"X block exhausted after {k} component(s); reduce n_components"
                    )
                c = Yc.T @ t / tt
                u_new = Yc @ c / max(float(c @ c), 1e-300)
                if np.linalg.norm(w_new - w) <= float(self.tol):
                    w = w_new
                    break
                w, u = w_new, u_new
            t = Xc @ w
            tt = float(t @ t)
            p = Xc.T @ t / tt
            c = Yc.T @ t / tt
            W[:, k], P[:, k], C[:, k], T[:, k] = w, p, c, t
            Xc = Xc - np.outer(t, p)
            Yc = Yc - np.outer(t, c)
        self.x_weights_ = W
        self.x_loadings_ = P
        self.y_loadings_ = C
        self.x_scores_ = T
        self.x_rotations_ = W @ np.linalg.inv(P.T @ W)
        self.coef_ = self.x_rotations_ @ C.T
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        return (X - self.x_mean_) @ self.x_rotations_

    def predict(self, X):
        X = check_matrix(X, "X")
        return (X - self.x_mean_) @ self.coef_ + self.y_mean_


class PlsDomainAdapter(BaseEstimator, TransformerMixin):
    """Remove the batch-predictive latent subspace of a feature block.

    fit(X, batch[, age]) codes the two batch levels as -1/+1 (plus z-scored
    age when include_age=True), fits PLS with that response, and stores the
    weights.  transform(X) reconstructs rows from the orthogonal complement of
    the removed score directions, so no batch label is needed at apply time.
    """

    def __init__(self, n_components=1, include_age=False):
        self.n_components = n_components
        self.include_age = include_age

    def fit(self, X, batch, age=None):
        X = check_matrix(X, "X")
        batch = check_labels(batch, X.shape[0], "batch")
        levels = sorted(set(batch))
        if len(levels) != 2:
            raise ValidationError(
                f"PLS adaptation needs exactly 2 batch levels, got {len(levels)}"
            )
        code = np.where(batch == levels[1], 1.0, -1.0)
        cols = [code]
        if self.include_age:
            if age is None:
                raise ValidationError("include_age=True requires an age vector")
            age = check_vector(age, "age")
            if age.shape[0] != X.shape[0]:
                raise ValidationError("age must have one entry per row")
            sd = age.std(ddof=1)
            if sd <= 0.0:
                raise ValidationError("age is constant; cannot standardize")
            cols.append((age - age.mean()) / sd)
        Y = np.column_stack(cols)
        self.batch_levels_ = levels
        self.pls_ = PlsRegression(n_components=int(self.n_components)).fit(X, Y)
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        pls = self.pls_
        scores = (X - pls.x_mean_) @ pls.x_rotations_
        return X - scores @ pls.x_loadings_.T

    def removed_scores(self, X):
        """Score coordinates along the removed directions (for diagnostics)."""
        return self.pls_.transform(X)


@dataclass(frozen=True)
class RegionBlocks:
    """Grouping of feature columns into named blocks."""

    block_of: np.ndarray
    block_names: tuple

    def __post_init__(self):
        block_of = np.asarray(self.block_of, dtype=np.int64)
        names = tuple(str(b) for b in self.block_names)
        if block_of.ndim != 1 or block_of.size == 0:
            raise ValidationError("block_of must be a non-empty vector")
        if block_of.min() < 0 or block_of.max() >= len(names):
            raise ValidationError("block index out of range")
        counts = np.bincount(block_of, minlength=len(names))
        if np.any(counts == 0):
            empty = [names[i] for i in np.flatnonzero(counts == 0)]
            raise ValidationError(f"empty block(s): {empty}")
        object.__setattr__(self, "block_of", block_of)
        object.__setattr__(self, "block_names", names)

    @property
    def n_blocks(self) -> int:
        return len(self.block_names)

    def columns(self, b) -> np.ndarray:
        return np.flatnonzero(self.block_of == b)


def single_block(n_features, name="all") -> RegionBlocks:
    return RegionBlocks(np.zeros(n_features, dtype=np.int64), (name,))


def load_block_map(path, feature_names) -> RegionBlocks:
    """Read a feature_name,block_name CSV and align it to the feature order."""
    mapping = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and [c.strip() for c in row[:2]] == ["feature_name", "block_name"]:
                continue
            if len(row) < 2:
                raise LoadError(f"{path}:{lineno}: expected feature_name,block_name")
            mapping[row[0].strip()] = row[1].strip()
    missing = [f for f in feature_names if f not in mapping]
    if missing:
        raise LoadError(f"{path}: no block for feature(s) {missing[:5]}")
    names = sorted(set(mapping[f] for f in feature_names))
    index = {b: i for i, b in enumerate(names)}
    block_of = np.asarray([index[mapping[f]] for f in feature_names], dtype=np.int64)
    return RegionBlocks(block_of, tuple(names))


def adapt_blocks(X_fit, batch, blocks, n_components=1, age=None, apply_to=None):
    """Fit a PlsDomainAdapter per block and return adapted matrices.

    Returns (adapted_fit, adapted_apply, adapters); apply_to may be None.
    The component count is capped per block at min(n_components, block width,
    n_fit - 1).
    """
    X_fit = check_matrix(X_fit, "X_fit")
    adapters = []
    out_fit = X_fit.copy()
    out_apply = None if apply_to is None else check_matrix(apply_to, "apply_to").copy()
    for b in range(blocks.n_blocks):
        cols = blocks.columns(b)
        k = min(int(n_components), cols.size, X_fit.shape[0] - 1)
        adapter = PlsDomainAdapter(n_components=max(k, 1), include_age=age is not None)
        adapter.fit(X_fit[:, cols], batch, age=age)
        adapters.append(adapter)
        out_fit[:, cols] = adapter.transform(X_fit[:, cols])
        if out_apply is not None:
            out_apply[:, cols] = adapter.transform(out_apply[:, cols])
    return out_fit, out_apply, adapters


class _CenteredKernelRidge:
    """RBF kernel ridge with the target centered around its mean."""

    def __init__(self, gamma, ridge):
        self.gamma = gamma
        self.ridge = ridge

    def fit(self, X, y):
        self.y_mean_ = float(np.mean(y))
        self.model_ = KernelRidge(alpha=self.ridge, kernel="rbf", gamma=self.gamma)
        self.model_.fit(X, y - self.y_mean_)
        return self

    def predict(self, X):
        return self.model_.predict(X) + self.y_mean_


class StackedBlockRegressor(BaseEstimator, RegressorMixin):
    """Per-block RBF kernel ridge base learners combined by an elastic net.

    The combiner trains on out-of-fold base predictions from an internal
    n_splits-fold split, then the base learners are refit on all rows.
    kernel_gamma=None uses 1/(block width) per block; the combiner penalty is
    selected by internal cross-validation over its alpha path.
    """

    def __init__(self, kernel_gamma=None, ridge=1.0, combiner_l1_ratio=0.5,
                 combiner_n_alphas=30, n_splits=5, random_state=0):
        self.kernel_gamma = kernel_gamma
        self.ridge = ridge
        self.combiner_l1_ratio = combiner_l1_ratio
        self.combiner_n_alphas = combiner_n_alphas
        self.n_splits = n_splits
        self.random_state = random_state

    def _base(self, width):
        gamma = self.kernel_gamma if self.kernel_gamma is not None else 1.0 / width
        return _CenteredKernelRidge(gamma=gamma, ridge=self.ridge)

    def fit(self, X, y, blocks: RegionBlocks):
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        if X.shape[0] != y.shape[0]:
            raise ValidationError("X and y must have the same number of rows")
        if blocks.n_blocks < 2:
            raise ValidationError("stacking needs at least 2 blocks")
        n = X.shape[0]
        if n < int(self.n_splits):
            raise ValidationError(
                f"blocks have {n} training rows; need at least {self.n_splits}"
            )
        rng = seeded_rng(int(self.random_state), 7041)
        order = rng.permutation(n)
        folds = np.array_split(order, int(self.n_splits))
        oof = np.empty((n, blocks.n_blocks))
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            for b in range(blocks.n_blocks):
                cols = blocks.columns(b)
                base = self._base(cols.size).fit(X[mask][:, cols], y[mask])
                oof[fold, b] = base.predict(X[fold][:, cols])
        self.oof_ = oof
        self.combiner_ = _cv_elastic_net(
            oof, y,
            l1_ratio=float(self.combiner_l1_ratio),
            n_alphas=int(self.combiner_n_alphas),
            n_folds=int(self.n_splits),
            seed=int(self.random_state) + 1,
        )
        self.base_models_ = []
        for b in range(blocks.n_blocks):
            cols = blocks.columns(b)
            self.base_models_.append(self._base(cols.size).fit(X[:, cols], y))
        self.blocks_ = blocks
        return self

    def predict(self, X):
        X = check_matrix(X, "X")
        preds = np.column_stack(
            [
                model.predict(X[:, self.blocks_.columns(b)])
                for b, model in enumerate(self.base_models_)
            ]
        )
        return self.combiner_.predict(preds)


def _cv_elastic_net(X, y, l1_ratio, n_alphas, n_folds, seed):
    """Elastic net with alpha picked by k-fold CV MSE (ties -> larger alpha)."""
    alphas = default_alpha_grid(X, y, l1_ratio=l1_ratio, n_alphas=n_alphas)
    n = X.shape[0]
    rng = seeded_rng(seed, 7042)
    order = rng.permutation(n)
    folds = np.array_split(order, max(2, min(n_folds, n)))
    sse = np.zeros(len(alphas))
    for fold in folds:
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        if mask.sum() < 2:
            continue
        coefs, intercepts = elastic_net_path(X[mask], y[mask], alphas, l1_ratio)
        preds = X[fold] @ coefs.T + intercepts
        sse += ((preds - y[fold][:, None]) ** 2).sum(axis=0)
    best = int(np.argmin(sse))  # alphas descend, argmin keeps the largest tie
    model = ElasticNetRegressor(alpha=float(alphas[best]), l1_ratio=l1_ratio)
    return model.fit(X, y)
