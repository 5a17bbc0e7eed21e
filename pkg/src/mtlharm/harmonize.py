"""Batch-effect harmonization.

CombatHarmonizer implements the empirical-Bayes location/scale adjustment:
each feature is modeled as  x = alpha + C beta + gamma_batch + delta_batch * eps,
the per-batch location gamma and scale delta are shrunk across features with
moment-matched normal / inverse-gamma priors, and the adjustment

    x_adj = (x - alpha - C beta - gamma*) / delta* + alpha + C beta

is applied on the standardized scale.  Fitting on training rows and applying
to held-out rows is supported; no statistic of the apply rows enters the fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError
from .validation import check_labels, check_matrix

__all__ = ["CombatHarmonizer", "CovariateResidualizer", "batch_t_diagnostic"]


def _as_covariates(covariates, n):
    if covariates is None:
        return None
    C = check_matrix(covariates, "covariates", allow_1d=True)
    if C.shape[0] != n:
        raise ValidationError("covariates must have one row per subject")
    return C


def _posterior_scale(sum2, n, m, s2):
    """EB posterior variance with inverse-gamma prior moment-matched to (m, s2).

    Equals (0.5*sum2 + b) / (n/2 + a - 1) with a = (2 s2 + m^2)/s2 and
    b = m (s2 + m^2)/s2, written in a form that stays finite as the
    across-feature variance s2 -> 0 (limit: the prior mean m).
    """
    return (0.5 * sum2 * s2 + m * (s2 + m * m)) / ((0.5 * n + 1.0) * s2 + m * m)


class CombatHarmonizer(BaseEstimator, TransformerMixin):
    """Location/scale batch harmonization with parametric empirical Bayes.

    Parameters
    ----------
    eb_tol : float
        Fixed-point tolerance for the per-batch EB iteration.
    eb_max_iter : int
        Iteration cap for the EB fixed point.

    Fitted attributes: grand_mean_, covariate_coef_ (M x C), gamma_star_ and
    delta_star_ (B x M), pooled_var_ (M,), batch_levels_, n_iter_eb_.
    """

    def __init__(self, eb_tol=1e-6, eb_max_iter=100):
        self.eb_tol = eb_tol
        self.eb_max_iter = eb_max_iter

    def fit(self, X, batch, covariates=None):
        X = check_matrix(X, "X")
        n, m = X.shape
        batch = check_labels(batch, n, "batch")
        C = _as_covariates(covariates, n)
        levels = sorted(set(batch))
        counts = {b: int(np.sum(batch == b)) for b in levels}
        for b, c in counts.items():
            if c < 2:
                raise ValidationError(
                    f"batch {b!r} has {c} subject(s); ComBat needs at least 2 per batch"
                )
        onehot = np.column_stack([(batch == b).astype(np.float64) for b in levels])
        design = onehot if C is None else np.column_stack([onehot, C])
        p = design.shape[1]
        if np.linalg.matrix_rank(design) < p:
            raise ValidationError(
                "singular design: covariates are collinear with the intercept/batch columns"
            )
        B_hat, *_ = np.linalg.lstsq(design, X, rcond=None)
        n_batches = len(levels)
        weights = np.asarray([counts[b] / n for b in levels])
        grand_mean = weights @ B_hat[:n_batches]
        cov_coef = B_hat[n_batches:].T if C is not None else np.zeros((m, 0))
        resid = X - design @ B_hat
        pooled_var = (resid * resid).sum(axis=0) / (n - p)
        if np.any(pooled_var <= 0.0):
            raise ValidationError(
                "zero pooled variance: some feature is constant after removing "
                "batch and covariate effects"
            )
        pooled_sd = np.sqrt(pooled_var)
        stand_mean = grand_mean if C is None else grand_mean + C @ cov_coef.T
        z = (X - stand_mean) / pooled_sd

        gamma_star = np.empty((n_batches, m))
        delta_star = np.empty((n_batches, m))
        n_iter_eb = []
        for i, b in enumerate(levels):
            zb = z[batch == b]
            nb = zb.shape[0]
            g_hat = zb.mean(axis=0)
            d_hat = zb.var(axis=0, ddof=1)
            if m >= 2:
                g_bar, t2 = float(g_hat.mean()), float(g_hat.var(ddof=1))
                d_m, d_s2 = float(d_hat.mean()), float(d_hat.var(ddof=1))
            else:
                g_bar, t2 = float(g_hat.mean()), 0.0
                d_m, d_s2 = float(d_hat.mean()), 0.0
            g_new, d_new = g_hat.copy(), d_hat.copy()
            it = 0
            for it in range(1, int(self.eb_max_iter) + 1):
                g_old, d_old = g_new, d_new
                g_new = (t2 * nb * g_hat + d_old * g_bar) / (t2 * nb + d_old)
                sum2 = ((zb - g_new) ** 2).sum(axis=0)
                d_new = _posterior_scale(sum2, nb, d_m, d_s2)
                change = max(
                    float(np.max(np.abs(g_new - g_old) / (1.0 + np.abs(g_old)))),
                    float(np.max(np.abs(d_new - d_old) / (1.0 + np.abs(d_old)))),
                )
                if change < float(self.eb_tol):
                    break
            gamma_star[i] = g_new
            delta_star[i] = np.sqrt(d_new)
            n_iter_eb.append(it)

        self.batch_levels_ = levels
        self.grand_mean_ = grand_mean
        self.covariate_coef_ = cov_coef
        self.pooled_var_ = pooled_var
        self.gamma_star_ = gamma_star
        self.delta_star_ = delta_star
        self.n_iter_eb_ = n_iter_eb
        return self

    def transform(self, X, batch, covariates=None):
        X = check_matrix(X, "X")
        n, m = X.shape
        if m != self.grand_mean_.shape[0]:
            raise ValidationError(
                f"expected {self.grand_mean_.shape[0]} columns, got {m}"
            )
        batch = check_labels(batch, n, "batch")
        unseen = sorted(set(batch) - set(self.batch_levels_))
        if unseen:
            raise ValidationError(f"unseen batch label(s): {unseen}")
        n_cov = self.covariate_coef_.shape[1]
        C = _as_covariates(covariates, n)
        if n_cov and C is None:
            raise ValidationError(
                f"harmonizer was fitted with {n_cov} covariate(s); pass them at apply"
            )
        if not n_cov and C is not None and C.shape[1]:
            raise ValidationError("harmonizer was fitted without covariates")
        if n_cov and C.shape[1] != n_cov:
            raise ValidationError(
                f"expected {n_cov} covariate column(s), got {C.shape[1]}"
            )
        stand_mean = self.grand_mean_ if not n_cov else self.grand_mean_ + C @ self.covariate_coef_.T
        pooled_sd = np.sqrt(self.pooled_var_)
        z = (X - stand_mean) / pooled_sd
        out = np.empty_like(z)
        index = {b: i for i, b in enumerate(self.batch_levels_)}
        for b in set(batch):
            i = index[b]
            mask = batch == b
            out[mask] = (z[mask] - self.gamma_star_[i]) / self.delta_star_[i]
        return out * pooled_sd + stand_mean

    def to_dict(self) -> dict:
        return {
            "batch_levels": list(self.batch_levels_),
            "grand_mean": self.grand_mean_.tolist(),
            "covariate_coef": self.covariate_coef_.tolist(),
            "pooled_var": self.pooled_var_.tolist(),
            "gamma_star": self.gamma_star_.tolist(),
            "delta_star": self.delta_star_.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "CombatHarmonizer":
        obj = cls()
        obj.batch_levels_ = list(d["batch_levels"])
        obj.grand_mean_ = np.asarray(d["grand_mean"], dtype=np.float64)
        obj.covariate_coef_ = np.asarray(d["covariate_coef"], dtype=np.float64)
        if obj.covariate_coef_.ndim == 1:
            obj.covariate_coef_ = obj.covariate_coef_.reshape(len(obj.grand_mean_), -1)
        obj.pooled_var_ = np.asarray(d["pooled_var"], dtype=np.float64)
        obj.gamma_star_ = np.asarray(d["gamma_star"], dtype=np.float64)
        obj.delta_star_ = np.asarray(d["delta_star"], dtype=np.float64)
        obj.n_iter_eb_ = None
        return obj


class CovariateResidualizer(BaseEstimator, TransformerMixin):
    """Remove per-feature linear covariate effects (intercept included).

    Fit an ordinary least-squares regression of each feature on the covariates
    over the training rows; transform subtracts the full linear prediction.
    """

    def fit(self, X, covariates):
        X = check_matrix(X, "X")
        C = _as_covariates(covariates, X.shape[0])
        if C is None or C.shape[1] == 0:
            raise ValidationError("residualizer needs at least one covariate column")
        if X.shape[0] < C.shape[1] + 2:
            raise ValidationError(
                f"need at least {C.shape[1] + 2} rows to fit the residualizer"
            )
        design = np.column_stack([np.ones(X.shape[0]), C])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise ValidationError("rank-deficient covariate design")
        coef, *_ = np.linalg.lstsq(design, X, rcond=None)
        self.intercept_ = coef[0]
        self.covariate_coef_ = coef[1:].T
        return self

    def transform(self, X, covariates):
        X = check_matrix(X, "X")
        C = _as_covariates(covariates, X.shape[0])
        if C is None or C.shape[1] != self.covariate_coef_.shape[1]:
            raise ValidationError(
                f"expected {self.covariate_coef_.shape[1]} covariate column(s)"
            )
        if X.shape[1] != self.intercept_.shape[0]:
            raise ValidationError(
                f"expected {self.intercept_.shape[0]} columns, got {X.shape[1]}"
            )
        return X - self.intercept_ - C @ self.covariate_coef_.T


def batch_t_diagnostic(X, batch, rows=None):
    """Welch two-sample t statistic per feature between exactly two batches.

    Degenerate features (both groups constant with numerically equal means)
    report t = 0; a genuinely shifted constant feature reports +/- inf.
    """
    X = check_matrix(X, "X")
    batch = check_labels(batch, X.shape[0], "batch")
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        X, batch = X[rows], batch[rows]
    levels = sorted(set(batch))
    if len(levels) != 2:
        raise ValidationError(
            f"diagnostic needs exactly 2 batch levels, got {len(levels)}"
        )
    a = X[batch == levels[0]]
    b = X[batch == levels[1]]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("each batch needs at least 2 subjects in the row set")
    diff = a.mean(axis=0) - b.mean(axis=0)
    se = np.sqrt(a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0])
    scale = np.maximum(1.0, np.maximum(np.abs(a).max(axis=0), np.abs(b).max(axis=0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / se
    degenerate = (se == 0.0) & (np.abs(diff) <= 1e-12 * scale)
    t[degenerate] = 0.0
    return t
