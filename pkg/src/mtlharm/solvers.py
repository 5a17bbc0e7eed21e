"""Penalized linear regression solvers.

Single-task: elastic net by cyclic coordinate descent with covariance updates.
Multitask: accelerated proximal gradient (FISTA, backtracking line search,
function-value adaptive restart) instantiated for four penalties: elementwise
L1 (multitask lasso), row-wise L2,1 (joint feature selection), the dirty
L1,inf + L1 superposition, and the trace norm.

The multitask loss is normalized per task,  sum_d ||X_d w_d + b_d - y_d||^2 / (2 n_d),
so penalty grids do not depend on cohort size.  Intercepts are unpenalized and
eliminated by centering each task's X and y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import NumericalError, ValidationError
from .prox import prox_group_l21, prox_linf_rows, prox_nuclear, soft_threshold
from .validation import check_matrix, check_same_rows, check_vector

__all__ = [
    "ElasticNetRegressor",
    "MultiTaskLasso",
    "JointFeatureSelection",
    "DirtyModel",
    "TraceNormRegressor",
    "default_alpha_grid",
    "elastic_net_path",
    "multitask_loss_grad",
    "stack_tasks",
    "fista",
]


# ---------------------------------------------------------------------------
# single-task elastic net
# ---------------------------------------------------------------------------

def default_alpha_grid(X, y, l1_ratio=0.5, n_alphas=100, min_ratio=1e-4):
    """Log-spaced penalty path from the null-model threshold downward.

    alpha_max is the smallest penalty for which all coefficients are zero;
    the grid descends to alpha_max * min_ratio.
    """
    X = check_matrix(X, "X")
    y = check_vector(y, "y")
    check_same_rows(X, y)
    n = X.shape[0]
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    alpha_max = np.max(np.abs(xc.T @ yc)) / (n * max(l1_ratio, 1e-3))
    if not np.isfinite(alpha_max) or alpha_max <= 0.0:
        return np.asarray([1.0])
    return np.geomspace(alpha_max, alpha_max * min_ratio, int(n_alphas))


def _cd_solve(G, q, alpha, l1_ratio, a0, max_iter, tol):
    """Cyclic coordinate descent on centered data given Gram = X'X/n, q = X'y/n."""
    m = q.shape[0]
    a = a0.copy()
    d = np.diag(G).copy()
    lam_l1 = alpha * l1_ratio
    lam_l2 = alpha * (1.0 - l1_ratio)
    r = q - G @ a  # negative smooth gradient, data part
    scale = max(1.0, float(np.max(np.abs(q))) if m else 1.0)
    kkt = np.inf
    for it in range(1, max_iter + 1):
        for j in range(m):
            if d[j] <= 0.0:
                if a[j] != 0.0:
                    r += G[:, j] * a[j]
                    a[j] = 0.0
                continue
            rho = r[j] + d[j] * a[j]
            new = np.sign(rho) * max(abs(rho) - lam_l1, 0.0) / (d[j] + lam_l2)
            delta = new - a[j]
            if delta != 0.0:
                r -= G[:, j] * delta
                a[j] = new
        grad = -r + lam_l2 * a
        viol = np.where(
            a > 0.0,
            np.abs(grad + lam_l1),
            np.where(a < 0.0, np.abs(grad - lam_l1), np.maximum(np.abs(grad) - lam_l1, 0.0)),
        )
        kkt = float(np.max(viol)) if m else 0.0
        if kkt <= tol * scale:
            return a, it, True, kkt
    return a, max_iter, False, kkt


class ElasticNetRegressor(BaseEstimator, RegressorMixin):
    """Elastic-net penalized least squares.

    Minimizes  (1/2n) ||y - b - X a||^2 + alpha * ((1 - l1_ratio) ||a||_2^2 / 2
    + l1_ratio ||a||_1)  with an unpenalized intercept b.  `alpha` is the
    overall penalty strength and `l1_ratio` the lasso/ridge mix (1.0 = lasso),
    matching the usual estimator conventions.

    Attributes after fit: coef_, intercept_, n_iter_, converged_, kkt_.
    """

    def __init__(self, alpha=1.0, l1_ratio=0.5, max_iter=1000, tol=1e-6):
        self.alpha = alpha
        self.l1_ratio = l1_ratio
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        check_same_rows(X, y)
        if X.shape[0] < 2:
            raise ValidationError("elastic net needs at least 2 rows")
        if not (self.alpha >= 0.0):
            raise ValueError(f"alpha must be nonnegative, got {self.alpha!r}")
        if not (0.0 <= self.l1_ratio <= 1.0):
            raise ValueError(f"l1_ratio must be in [0, 1], got {self.l1_ratio!r}")
        n = X.shape[0]
        mx = X.mean(axis=0)
        my = y.mean()
        xc = X - mx
        yc = y - my
        G = (xc.T @ xc) / n
        q = (xc.T @ yc) / n
        a0 = np.zeros(X.shape[1])
        a, n_iter, ok, kkt = _cd_solve(
            G, q, float(self.alpha), float(self.l1_ratio), a0,
            int(self.max_iter), float(self.tol),
        )
        self.coef_ = a
        self.intercept_ = float(my - mx @ a)
        self.n_iter_ = n_iter
        self.converged_ = ok
        self.kkt_ = kkt
        return self

    def predict(self, X):
        X = check_matrix(X, "X")
        if X.shape[1] != self.coef_.shape[0]:
            raise ValidationError(
                f"expected {self.coef_.shape[0]} columns, got {X.shape[1]}"
            )
        return X @ self.coef_ + self.intercept_

    def objective(self, X, y):
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        r = y - self.predict(X)
        pen = self.alpha * (
            (1.0 - self.l1_ratio) * 0.5 * float(self.coef_ @ self.coef_)
            + self.l1_ratio * float(np.abs(self.coef_).sum())
        )
        return float(r @ r) / (2.0 * X.shape[0]) + pen


def elastic_net_path(X, y, alphas, l1_ratio=0.5, max_iter=1000, tol=1e-6):
    """Fit the full path with warm starts; alphas should be descending.

    Returns (coefs, intercepts): coefs has shape (len(alphas), M).
    """
    X = check_matrix(X, "X")
    y = check_vector(y, "y")
    check_same_rows(X, y)
    n, m = X.shape
    mx = X.mean(axis=0)
    my = y.mean()
    xc = X - mx
    yc = y - my
    G = (xc.T @ xc) / n
    q = (xc.T @ yc) / n
    a = np.zeros(m)
    coefs = np.empty((len(alphas), m))
    intercepts = np.empty(len(alphas))
    for i, alpha in enumerate(alphas):
        a, _, _, _ = _cd_solve(G, q, float(alpha), float(l1_ratio), a, max_iter, tol)
        coefs[i] = a
        intercepts[i] = my - mx @ a
    return coefs, intercepts


# ---------------------------------------------------------------------------
# FISTA engine
# ---------------------------------------------------------------------------

@dataclass
class FistaResult:
    W: np.ndarray
    objective: float
    trace: list
    n_iter: int
    converged: bool


def fista(f_grad, penalty, prox, W0, *, max_iter=1000, rel_tol=1e-6,
          backtrack=0.5, step0=1.0) -> FistaResult:
    """Accelerated proximal gradient with backtracking and adaptive restart.

    f_grad(W) -> (value, gradient) of the smooth part; penalty(W) -> the
    nonsmooth value; prox(V, step) -> argmin_x 0.5||x - V||^2 + step * pen(x).
    Restarts (momentum reset + plain proximal step) whenever the objective
    would increase, so the recorded trace is non-increasing.
    """
    if not (0.0 < backtrack < 1.0):
        raise ValueError(f"backtrack factor must be in (0, 1), got {backtrack!r}")
    if step0 <= 0.0:
        raise ValueError(f"initial step must be positive, got {step0!r}")
    x = W0.copy()
    x_prev = W0.copy()
    th = th_prev = 1.0
    f_x, _ = f_grad(x)
    obj = f_x + penalty(x)
    obj0 = obj
    trace = [obj]
    step = float(step0)
    converged = False
    n_iter = 0

    def _prox_step(point, step):
        f_y, g_y = f_grad(point)
        while True:
            cand = prox(point - step * g_y, step)
            diff = cand - point
            f_c, _ = f_grad(cand)
            bound = f_y + float(np.sum(diff * g_y)) + float(np.sum(diff * diff)) / (2.0 * step)
            if np.isfinite(f_c) and f_c <= bound + 1e-12 * max(1.0, abs(bound)):
                return cand, f_c, step
            step *= backtrack
            if step < 1e-20:
                raise NumericalError("line search failed: step size underflow")

    for k in range(1, max_iter + 1):
        n_iter = k
        beta = (th_prev - 1.0) / th
        y = x + beta * (x - x_prev)
        cand, f_c, step = _prox_step(y, step)
        new_obj = f_c + penalty(cand)
        if new_obj > obj:
            # adaptive restart: drop momentum, take a plain descent step from x
            th = th_prev = 1.0
            cand, f_c, step = _prox_step(x, step)
            new_obj = f_c + penalty(cand)
        if not np.isfinite(new_obj) or new_obj > 1e3 * max(1.0, obj0):
            raise NumericalError(
                f"objective diverged at iteration {k}: {new_obj!r}"
            )
        x_prev = x
        x = cand
        th_prev = th
        th = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * th * th))
        trace.append(new_obj)
        if abs(obj - new_obj) <= rel_tol * max(1.0, abs(obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return FistaResult(W=x, objective=obj, trace=trace, n_iter=n_iter, converged=converged)


# ---------------------------------------------------------------------------
# multitask loss
# ---------------------------------------------------------------------------

def multitask_loss_grad(Xs, ys, W, ridge=0.0):
    """Smooth multitask loss and its gradient at W (columns = tasks).

    loss = sum_d ||X_d w_d - y_d||^2 / (2 n_d) + ridge * ||W||_F^2.
    """
    W = np.asarray(W, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(W)
    for d, (X, y) in enumerate(zip(Xs, ys)):
        n = X.shape[0]
        r = X @ W[:, d] - y
        loss += float(r @ r) / (2.0 * n)
        grad[:, d] = (X.T @ r) / n
    if ridge:
        loss += ridge * float(np.sum(W * W))
        grad += 2.0 * ridge * W
    return loss, grad


class _QuadraticLoss:
    """Precomputed Gram form of the per-task-normalized least-squares loss."""

    def __init__(self, Xs, ys, ridge=0.0):
        self.parts = []
        for X, y in zip(Xs, ys):
            n = X.shape[0]
            self.parts.append((X.T @ X / n, X.T @ y / n, float(y @ y) / n, n))
        self.ridge = float(ridge)

    def __call__(self, W):
        loss = 0.0
        grad = np.empty_like(W)
        for d, (G, q, yty, _) in enumerate(self.parts):
            w = W[:, d]
            Gw = G @ w
            loss += 0.5 * (float(w @ Gw) - 2.0 * float(w @ q) + yty)
            grad[:, d] = Gw - q
        if self.ridge:
            loss += self.ridge * float(np.sum(W * W))
            grad += 2.0 * self.ridge * W
        return loss, grad


def stack_tasks(Xs, ys):
    """Stack per-task (X, y) lists into (X, y, tasks) row form."""
    X = np.vstack([np.asarray(x, dtype=np.float64) for x in Xs])
    y = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in ys])
    tasks = np.concatenate(
        [np.full(len(v), d, dtype=np.int64) for d, v in enumerate(ys)]
    )
    return X, y, tasks


# ---------------------------------------------------------------------------
# multitask estimators
# ---------------------------------------------------------------------------

class BaseMultiTaskRegressor(BaseEstimator, RegressorMixin):
    """Shared fitting machinery for the FISTA-based multitask models.

    fit(X, y, tasks) takes stacked rows with an integer task index per row;
    every task in 0..S-1 must have at least one training row.  Fitted
    attributes: coef_ (M x S), intercepts_ (S,), n_iter_, objective_,
    objective_trace_, converged_, n_tasks_.
    """

    def __init__(self, rho1=1.0, rho2=0.0, max_iter=1000, tol=1e-6,
                 backtrack=0.5, step0=1.0):
        self.rho1 = rho1
        self.rho2 = rho2
        self.max_iter = max_iter
        self.tol = tol
        self.backtrack = backtrack
        self.step0 = step0

    def _split(self, X, y, tasks):
        X = check_matrix(X, "X")
        y = check_vector(y, "y")
        check_same_rows(X, y)
        tasks = np.asarray(tasks, dtype=np.int64).ravel()
        if tasks.shape[0] != X.shape[0]:
            raise ValidationError("tasks must assign one index per row")
        if tasks.size == 0:
            raise ValidationError("no training rows")
        if tasks.min() < 0:
            raise ValidationError("task indices must be nonnegative")
        S = int(tasks.max()) + 1
        Xs, ys, x_means, y_means = [], [], [], []
        for d in range(S):
            idx = np.flatnonzero(tasks == d)
            if idx.size == 0:
                raise ValidationError(f"task {d} has no training rows")
            Xd, yd = X[idx], y[idx]
            mx, my = Xd.mean(axis=0), yd.mean()
            Xs.append(Xd - mx)
            ys.append(yd - my)
            x_means.append(mx)
            y_means.append(my)
        return Xs, ys, np.asarray(x_means), np.asarray(y_means), S

    def fit(self, X, y, tasks):
        for name in ("rho1", "rho2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be nonnegative, got {v!r}")
        Xs, ys, x_means, y_means, S = self._split(X, y, tasks)
        M = Xs[0].shape[1]
        W, extras = self._solve(Xs, ys, M, S)
        self.coef_ = W
        self.intercepts_ = y_means - np.asarray(
            [x_means[d] @ W[:, d] for d in range(S)]
        )
        self.n_tasks_ = S
        for key, val in extras.items():
            setattr(self, key, val)
        return self

    def predict(self, X, tasks):
        X = check_matrix(X, "X")
        if X.shape[1] != self.coef_.shape[0]:
            raise ValidationError(
                f"expected {self.coef_.shape[0]} columns, got {X.shape[1]}"
            )
        tasks = np.asarray(tasks, dtype=np.int64).ravel()
        if tasks.shape[0] != X.shape[0]:
            raise ValidationError("tasks must assign one index per row")
        if tasks.size and (tasks.min() < 0 or tasks.max() >= self.n_tasks_):
            raise ValidationError("task index out of range for this model")
        return np.einsum("ij,ji->i", X, self.coef_[:, tasks]) + self.intercepts_[tasks]

    # subclasses return (W, extras dict)
    def _solve(self, Xs, ys, M, S):  # pragma: no cover - abstract
        raise NotImplementedError

    def _run_fista(self, loss, penalty, prox, W0):
        res = fista(
            loss, penalty, prox, W0,
            max_iter=int(self.max_iter), rel_tol=float(self.tol),
            backtrack=float(self.backtrack), step0=float(self.step0),
        )
        extras = {
            "n_iter_": res.n_iter,
            "objective_": res.objective,
            "objective_trace_": res.trace,
            "converged_": res.converged,
        }
        return res.W, extras


class MultiTaskLasso(BaseMultiTaskRegressor):
    """Elementwise L1 across all tasks plus an optional squared-L2 term.

    objective = loss + rho1 * ||W||_1 + rho2 * ||W||_F^2; with rho2 = 0 the
    problem separates into independent per-task lassos.
    """

    def _solve(self, Xs, ys, M, S):
        loss = _QuadraticLoss(Xs, ys, ridge=self.rho2)
        rho1 = float(self.rho1)
        return self._run_fista(
            loss,
            lambda W: rho1 * float(np.abs(W).sum()),
            lambda V, step: soft_threshold(V, step * rho1),
            np.zeros((M, S)),
        )


class JointFeatureSelection(BaseMultiTaskRegressor):
    """Row-wise L2,1 penalty so all tasks share a common feature support.

    objective = loss + rho1 * sum_rows ||row||_2 + rho2 * ||W||_F^2.
    """

    def _solve(self, Xs, ys, M, S):
        loss = _QuadraticLoss(Xs, ys, ridge=self.rho2)
        rho1 = float(self.rho1)
        return self._run_fista(
            loss,
            lambda W: rho1 * float(np.sqrt((W * W).sum(axis=1)).sum()),
            lambda V, step: prox_group_l21(V, step * rho1),
            np.zeros((M, S)),
        )


class TraceNormRegressor(BaseMultiTaskRegressor):
    """Trace-norm (sum of singular values) penalty; rho2 is unused."""

    def _solve(self, Xs, ys, M, S):
        loss = _QuadraticLoss(Xs, ys)
        rho1 = float(self.rho1)
        return self._run_fista(
            loss,
            lambda W: rho1 * float(np.linalg.svd(W, compute_uv=False).sum()),
            lambda V, step: prox_nuclear(V, step * rho1),
            np.zeros((M, S)),
        )


class DirtyModel(BaseMultiTaskRegressor):
    """Superposition W = S + R with rho2 * ||S||_1 + rho1 * ||R||_{1,inf}.

    Solved by block-alternating FISTA over the two components; the outer loop
    stops when the joint objective's relative change drops below tol.
    Fitted extras: sparse_coef_ (the elementwise-sparse part) and block_coef_
    (the row-structured part), with coef_ = sparse_coef_ + block_coef_.
    """

    def __init__(self, rho1=1.0, rho2=1.0, max_iter=1000, tol=1e-6,
                 backtrack=0.5, step0=1.0, max_outer=100):
        super().__init__(rho1=rho1, rho2=rho2, max_iter=max_iter, tol=tol,
                         backtrack=backtrack, step0=step0)
        self.max_outer = max_outer

    def _solve(self, Xs, ys, M, S):
        loss = _QuadraticLoss(Xs, ys)
        rho1, rho2 = float(self.rho1), float(self.rho2)

        def linf_rows(W):
            return float(np.abs(W).max(axis=1).sum()) if W.size else 0.0

        def joint_obj(S_mat, R_mat):
            f, _ = loss(S_mat + R_mat)
            return f + rho1 * linf_rows(R_mat) + rho2 * float(np.abs(S_mat).sum())

        S_mat = np.zeros((M, S))
        R_mat = np.zeros((M, S))
        obj = joint_obj(S_mat, R_mat)
        trace = [obj]
        total_iter = 0
        converged = False
        for _ in range(int(self.max_outer)):
            fixed_R = R_mat

            def loss_S(Sm, _R=fixed_R):
                f, g = loss(Sm + _R)
                return f, g

            res = fista(
                loss_S,
                lambda Sm: rho2 * float(np.abs(Sm).sum()),
                lambda V, step: soft_threshold(V, step * rho2),
                S_mat,
                max_iter=int(self.max_iter), rel_tol=float(self.tol),
                backtrack=float(self.backtrack), step0=float(self.step0),
            )
            S_mat = res.W
            total_iter += res.n_iter
            fixed_S = S_mat

            def loss_R(Rm, _S=fixed_S):
                f, g = loss(_S + Rm)
                return f, g

            res = fista(
                loss_R,
                lambda Rm: rho1 * linf_rows(Rm),
                lambda V, step: prox_linf_rows(V, step * rho1),
                R_mat,
                max_iter=int(self.max_iter), rel_tol=float(self.tol),
                backtrack=float(self.backtrack), step0=float(self.step0),
            )
            R_mat = res.W
            total_iter += res.n_iter
            new_obj = joint_obj(S_mat, R_mat)
            trace.append(new_obj)
            if abs(obj - new_obj) <= float(self.tol) * max(1.0, abs(obj)):
                obj = new_obj
                converged = True
                break
            obj = new_obj
        extras = {
            "n_iter_": total_iter,
            "objective_": obj,
            "objective_trace_": trace,
            "converged_": converged,
            "sparse_coef_": S_mat,
            "block_coef_": R_mat,
        }
        return S_mat + R_mat, extras
