"""Solver tests: closed-form oracles, separability, grid optima, gradients."""

import numpy as np
import pytest

from mtlharm.exceptions import ValidationError
from mtlharm.solvers import (
    DirtyModel,
    ElasticNetRegressor,
    JointFeatureSelection,
    MultiTaskLasso,
    TraceNormRegressor,
    default_alpha_grid,
    elastic_net_path,
    multitask_loss_grad,
    stack_tasks,
)
from mtlharm.synth import brute_force_penalized_ls


def lstsq_with_intercept(X, y):
    A = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef[1:], coef[0]


class TestElasticNet:
    def test_unpenalized_matches_normal_equations(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((10, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(10)
        en = ElasticNetRegressor(alpha=0.0, tol=1e-12, max_iter=5000).fit(X, y)
        coef, b = lstsq_with_intercept(X, y)
        np.testing.assert_allclose(en.coef_, coef, atol=1e-6)
        assert abs(en.intercept_ - b) < 1e-6

    def test_above_null_threshold_gives_zero(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((30, 4))
        y = rng.standard_normal(30)
        yc = y - y.mean()
        xc = X - X.mean(axis=0)
        alpha_max = np.max(np.abs(xc.T @ yc)) / 30
        en = ElasticNetRegressor(alpha=10 * alpha_max, l1_ratio=1.0).fit(X, y)
        np.testing.assert_array_equal(en.coef_, 0.0)
        assert abs(en.intercept_ - y.mean()) < 1e-12

    def test_support_recovery_at_high_snr(self):
        # SNR >= 10 at N=200, M=20 with the paper-style l1_ratio=0.5 mix
        rng = np.random.default_rng(7)
        n, m, s = 200, 20, 4
        X = rng.standard_normal((n, m))
        true = np.zeros(m)
        support = np.array([2, 5, 11, 17])
        true[support] = np.array([3.0, -2.5, 2.0, 3.5])
        signal = X @ true
        noise_sd = np.std(signal) / np.sqrt(10.0)
        y = signal + noise_sd * rng.standard_normal(n)
        alphas = default_alpha_grid(X, y, 0.5, n_alphas=40)
        # select by 5-fold CV
        folds = np.array_split(rng.permutation(n), 5)
        sse = np.zeros(len(alphas))
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            coefs, bs = elastic_net_path(X[mask], y[mask], alphas, 0.5)
            preds = X[fold] @ coefs.T + bs
            sse += ((preds - y[fold][:, None]) ** 2).sum(axis=0)
        en = ElasticNetRegressor(alpha=alphas[int(np.argmin(sse))], l1_ratio=0.5).fit(X, y)
        top = np.argsort(-np.abs(en.coef_))[:s]
        assert set(top.tolist()) == set(support.tolist())

    def test_matches_grid_oracle_on_small_lasso(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((12, 2))
        y = X @ np.array([1.2, -0.7]) + 0.3 * rng.standard_normal(12)
        alpha = 0.2
        en = ElasticNetRegressor(alpha=alpha, l1_ratio=1.0, tol=1e-12).fit(X, y)
        _, obj_grid = brute_force_penalized_ls(
            [X], [y], {"kind": "en", "alpha": alpha, "l1_ratio": 1.0},
            box=(-3.0, 3.0), resolution=0.01,
        )
        assert en.objective(X, y) <= obj_grid + 1e-3

    def test_nonconvergence_flag_not_silent(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((40, 10))
        y = rng.standard_normal(40)
        en = ElasticNetRegressor(alpha=1e-8, max_iter=1, tol=1e-14).fit(X, y)
        assert en.converged_ is False

    def test_bad_args_rejected(self):
        X = np.ones((3, 1))
        with pytest.raises(ValueError):
            ElasticNetRegressor(alpha=-1.0).fit(X, [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            ElasticNetRegressor(l1_ratio=1.5).fit(X, [1.0, 2.0, 3.0])


def random_tasks(rng, n_per=(25, 30), m=4, noise=0.2):
    Xs, ys = [], []
    for n in n_per:
        X = rng.standard_normal((n, m))
        w = rng.standard_normal(m)
        ys.append(X @ w + noise * rng.standard_normal(n) + rng.normal())
        Xs.append(X)
    return Xs, ys


class TestFistaSolvers:
    def test_zero_penalty_matches_per_task_least_squares(self):
        rng = np.random.default_rng(5)
        Xs, ys = random_tasks(rng)
        X, y, tasks = stack_tasks(Xs, ys)
        model = MultiTaskLasso(rho1=0.0, rho2=0.0, tol=1e-13, max_iter=8000).fit(X, y, tasks)
        for d in range(2):
            coef, b = lstsq_with_intercept(Xs[d], ys[d])
            np.testing.assert_allclose(model.coef_[:, d], coef, atol=1e-6)
            assert abs(model.intercepts_[d] - b) < 1e-6

    def test_trace_norm_single_task_collapses_to_group_shrinkage(self):
        # with orthonormal centered columns the solution is the closed-form
        # radial shrinkage of the least-squares coefficients
        rng = np.random.default_rng(6)
        n, m = 40, 3
        A = rng.standard_normal((n, m))
        A -= A.mean(axis=0)
        Q, _ = np.linalg.qr(A)
        X = np.sqrt(n) * Q
        y = X @ np.array([1.0, -0.5, 0.25]) + 0.1 * rng.standard_normal(n)
        rho = 0.3
        model = TraceNormRegressor(rho1=rho, tol=1e-13, max_iter=8000).fit(
            X, y, np.zeros(n, dtype=int)
        )
        q = X.T @ (y - y.mean()) / n
        expect = max(1.0 - rho / np.linalg.norm(q), 0.0) * q
        np.testing.assert_allclose(model.coef_[:, 0], expect, atol=1e-6)

    def test_mt_lasso_separates_into_per_task_lassos(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            Xs, ys = random_tasks(rng, n_per=(20, 26), m=5)
            rho1 = rng.uniform(0.02, 0.3)
            X, y, tasks = stack_tasks(Xs, ys)
            mtl = MultiTaskLasso(rho1=rho1, rho2=0.0, tol=1e-13, max_iter=10000).fit(X, y, tasks)
            for d in range(2):
                en = ElasticNetRegressor(alpha=rho1, l1_ratio=1.0, tol=1e-12,
                                         max_iter=10000).fit(Xs[d], ys[d])
                np.testing.assert_allclose(mtl.coef_[:, d], en.coef_, atol=1e-5)

    def test_jfs_identical_tasks_agree_and_match_scaled_lasso(self):
        rng = np.random.default_rng(9)
        X0 = rng.standard_normal((30, 4))
        y0 = X0 @ np.array([1.0, 0.0, -1.0, 0.5]) + 0.2 * rng.standard_normal(30)
        X, y, tasks = stack_tasks([X0, X0], [y0, y0])
        rho1 = 0.2
        jfs = JointFeatureSelection(rho1=rho1, rho2=0.0, tol=1e-13, max_iter=10000).fit(X, y, tasks)
        np.testing.assert_allclose(jfs.coef_[:, 0], jfs.coef_[:, 1], atol=1e-6)
        # tied columns reduce to a single lasso with penalty rho1/sqrt(2)
        en = ElasticNetRegressor(alpha=rho1 / np.sqrt(2.0), l1_ratio=1.0,
                                 tol=1e-12, max_iter=10000).fit(X0, y0)
        np.testing.assert_allclose(jfs.coef_[:, 0], en.coef_, atol=1e-5)

    def test_dirty_huge_rho2_kills_sparse_part(self):
        rng = np.random.default_rng(10)
        Xs, ys = random_tasks(rng)
        X, y, tasks = stack_tasks(Xs, ys)
        model = DirtyModel(rho1=0.05, rho2=1e9, tol=1e-10).fit(X, y, tasks)
        assert np.abs(model.sparse_coef_).max() < 1e-6

    def test_dirty_huge_rho1_reduces_to_per_task_lasso(self):
        rng = np.random.default_rng(11)
        Xs, ys = random_tasks(rng)
        X, y, tasks = stack_tasks(Xs, ys)
        rho2 = 0.1
        model = DirtyModel(rho1=1e9, rho2=rho2, tol=1e-12, max_iter=5000).fit(X, y, tasks)
        assert np.abs(model.block_coef_).max() < 1e-8
        for d in range(2):
            en = ElasticNetRegressor(alpha=rho2, l1_ratio=1.0, tol=1e-12,
                                     max_iter=10000).fit(Xs[d], ys[d])
            np.testing.assert_allclose(model.coef_[:, d], en.coef_, atol=1e-4)

    def test_objective_trace_monotone_after_restarts(self):
        rng = np.random.default_rng(12)
        Xs, ys = random_tasks(rng, n_per=(15, 18), m=6)
        X, y, tasks = stack_tasks(Xs, ys)
        for cls, kw in [
            (MultiTaskLasso, {"rho1": 0.1, "rho2": 0.01}),
            (JointFeatureSelection, {"rho1": 0.2, "rho2": 0.0}),
            (TraceNormRegressor, {"rho1": 0.15}),
            (DirtyModel, {"rho1": 0.1, "rho2": 0.1}),
        ]:
            model = cls(tol=1e-10, **kw).fit(X, y, tasks)
            trace = np.asarray(model.objective_trace_)
            assert np.all(np.diff(trace) <= 1e-10), cls.__name__

    def test_scaling_covariance_with_zero_penalty(self):
        # exactness check, so run both solves to numerical stationarity
        rng = np.random.default_rng(13)
        Xs, ys = random_tasks(rng, n_per=(30, 30), m=4, noise=0.1)
        X, y, tasks = stack_tasks(Xs, ys)
        base = MultiTaskLasso(rho1=0.0, rho2=0.0, tol=1e-30, max_iter=20000).fit(X, y, tasks)
        c = 3.7
        ys2 = [ys[0] * c, ys[1]]
        X2, y2, tasks2 = stack_tasks(Xs, ys2)
        scaled = MultiTaskLasso(rho1=0.0, rho2=0.0, tol=1e-30, max_iter=20000).fit(X2, y2, tasks2)
        np.testing.assert_allclose(scaled.coef_[:, 0], c * base.coef_[:, 0],
                                   rtol=0.0, atol=1e-8 * max(1.0, c))
        np.testing.assert_allclose(scaled.coef_[:, 1], base.coef_[:, 1], atol=1e-8)

    def test_empty_task_rejected(self):
        X = np.ones((3, 2))
        y = np.ones(3)
        with pytest.raises(ValidationError, match="task 1"):
            MultiTaskLasso().fit(X, y, [0, 0, 2])

    def test_nonconvergence_flag_not_silent(self):
        rng = np.random.default_rng(18)
        Xs, ys = random_tasks(rng, n_per=(40, 40), m=8)
        X, y, tasks = stack_tasks(Xs, ys)
        model = MultiTaskLasso(rho1=0.01, rho2=0.0, tol=1e-30, max_iter=3).fit(X, y, tasks)
        assert model.converged_ is False
        assert model.n_iter_ == 3


class TestGradient:
    def test_analytic_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        h = 1e-5
        for _ in range(5):
            Xs = [rng.standard_normal((8, 5)) for _ in range(3)]
            ys = [rng.standard_normal(8) for _ in range(3)]
            W = rng.standard_normal((5, 3))
            ridge = rng.uniform(0.0, 0.5)
            _, grad = multitask_loss_grad(Xs, ys, W, ridge=ridge)
            fd = np.zeros_like(W)
            for i in range(5):
                for j in range(3):
                    Wp, Wm = W.copy(), W.copy()
                    Wp[i, j] += h
                    Wm[i, j] -= h
                    fp, _ = multitask_loss_grad(Xs, ys, Wp, ridge=ridge)
                    fm, _ = multitask_loss_grad(Xs, ys, Wm, ridge=ridge)
                    fd[i, j] = (fp - fm) / (2 * h)
            rel = np.linalg.norm(grad - fd) / max(1.0, np.linalg.norm(fd))
            assert rel < 1e-5


class TestPredict:
    def test_zero_weight_model_predicts_intercept(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((20, 3))
        y = np.full(20, 4.2) + 0.0 * rng.standard_normal(20)
        en = ElasticNetRegressor(alpha=5.0, l1_ratio=1.0).fit(X, y)
        np.testing.assert_array_equal(en.coef_, 0.0)
        np.testing.assert_allclose(en.predict(X), 4.2, atol=1e-12)

    def test_noiseless_training_r_is_one(self):
        rng = np.random.default_rng(16)
        X = rng.standard_normal((50, 4))
        y = X @ np.array([2.0, -1.0, 0.5, 0.0]) + 3.0
        en = ElasticNetRegressor(alpha=1e-10, tol=1e-13, max_iter=20000).fit(X, y)
        pred = en.predict(X)
        r = np.corrcoef(y, pred)[0, 1]
        assert r > 1.0 - 1e-6

    def test_mismatched_width_rejected(self):
        rng = np.random.default_rng(17)
        X = rng.standard_normal((10, 3))
        en = ElasticNetRegressor(alpha=0.1).fit(X, rng.standard_normal(10))
        with pytest.raises(ValidationError):
            en.predict(rng.standard_normal((5, 4)))
        X2, y2, t2 = stack_tasks([X], [rng.standard_normal(10)])
        mtl = MultiTaskLasso(rho1=0.1).fit(X2, y2, t2)
        with pytest.raises(ValidationError):
            mtl.predict(rng.standard_normal((5, 4)), tasks=np.zeros(5, dtype=int))
        with pytest.raises(ValidationError):
            mtl.predict(X, tasks=np.ones(10, dtype=int))  # task out of range
