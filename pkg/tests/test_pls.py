"""PLS regression, domain adaptation and stacked prediction tests."""

import numpy as np
import pytest

from mtlharm.evaluation import SearchGrid
from mtlharm.exceptions import ConfigError, ValidationError
from mtlharm.pls import (
    PlsDomainAdapter,
    PlsRegression,
    RegionBlocks,
    StackedBlockRegressor,
    adapt_blocks,
    single_block,
)
from mtlharm.validation import seeded_rng


def batch_labels(n_per):
    return np.array(["a"] * n_per + ["b"] * n_per, dtype=object)


class TestPlsRegression:
    def test_rank_one_captures_all_y_variance(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal(50)
        X = np.outer(t, rng.standard_normal(4))
        y = 2.0 * t + 1.0
        pls = PlsRegression(n_components=1).fit(X, y)
        resid = y - pls.predict(X)[:, 0]
        yc = y - y.mean()
        assert float(resid @ resid) / float(yc @ yc) < 1e-8

    def test_independent_y_explains_little(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((200, 10))
        y = rng.standard_normal(200)
        pls = PlsRegression(n_components=1).fit(X, y)
        pred = pls.predict(X)[:, 0]
        yc = y - y.mean()
        explained = 1.0 - float((y - pred) @ (y - pred)) / float(yc @ yc)
        assert explained < 0.05

    def test_scores_orthogonal(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((40, 8))
        Y = rng.standard_normal((40, 2))
        pls = PlsRegression(n_components=4).fit(X, Y)
        G = pls.x_scores_.T @ pls.x_scores_
        off = G - np.diag(np.diag(G))
        assert np.abs(off).max() < 1e-8

    def test_component_count_validated(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((10, 3))
        y = rng.standard_normal(10)
        with pytest.raises(ValidationError):
            PlsRegression(n_components=5).fit(X, y)
        with pytest.raises(ValidationError):
            PlsRegression(n_components=1).fit(X, np.zeros(10))

    def test_candidate_set_accepted_by_config(self):
        for k in (5, 10, 15, 17, 20, 25):
            SearchGrid(pls_components=k)
        SearchGrid(pls_components="auto")
        with pytest.raises(ConfigError):
            SearchGrid(pls_components=0)


class TestDomainAdapter:
    def test_pure_batch_indicator_fully_removed(self):
        n_per, m = 30, 5
        code = np.concatenate([-np.ones(n_per), np.ones(n_per)])
        X = np.tile(code.reshape(-1, 1), (1, m)) * np.arange(1.0, m + 1.0)
        batch = batch_labels(n_per)
        adapter = PlsDomainAdapter(n_components=1).fit(X, batch)
        out = adapter.transform(X)
        np.testing.assert_allclose(out - X.mean(axis=0), 0.0, atol=1e-8)
        from mtlharm.harmonize import batch_t_diagnostic

        assert np.abs(batch_t_diagnostic(out, batch)).max() < 1e-6

    def test_batch_orthogonal_direction_preserved(self):
        rng = seeded_rng(4)
        n_per, m = 40, 6
        n = 2 * n_per
        u = np.concatenate([-np.ones(n_per), np.ones(n_per)])  # batch direction
        s = rng.standard_normal(n)
        s -= s.mean()
        s -= (s @ u) / (u @ u) * u  # orthogonal to the batch code
        c = np.zeros(m); c[0] = 1.0
        d = np.zeros(m); d[1] = 1.0
        X = np.outer(u, c) + np.outer(s, d)
        batch = batch_labels(n_per)
        adapter = PlsDomainAdapter(n_components=1).fit(X, batch)
        out = adapter.transform(X)
        out_c = out - out.mean(axis=0)
        planted = np.outer(s, d)
        cos = float((out_c * planted).sum()) / (
            np.linalg.norm(out_c) * np.linalg.norm(planted)
        )
        assert cos > 1.0 - 1e-6

    def test_idempotent_on_training_rows(self):
        rng = seeded_rng(5)
        X = rng.standard_normal((60, 7))
        X[30:] += 1.0
        batch = batch_labels(30)
        adapter = PlsDomainAdapter(n_components=2).fit(X, batch)
        once = adapter.transform(X)
        twice = adapter.transform(once)
        np.testing.assert_allclose(twice, once, atol=1e-8)

    def test_adapted_features_orthogonal_to_removed_scores(self):
        rng = seeded_rng(6)
        X = rng.standard_normal((50, 6))
        X[25:] += 0.8
        batch = batch_labels(25)
        adapter = PlsDomainAdapter(n_components=2).fit(X, batch)
        out = adapter.transform(X)
        T = adapter.pls_.x_scores_
        inner = (out - out.mean(axis=0)).T @ T
        assert np.abs(inner).max() < 1e-6

    def test_age_response_requires_age(self):
        rng = seeded_rng(7)
        X = rng.standard_normal((20, 3))
        with pytest.raises(ValidationError):
            PlsDomainAdapter(n_components=1, include_age=True).fit(
                X, batch_labels(10)
            )

    def test_heldout_rows_supported(self):
        rng = seeded_rng(8)
        X = rng.standard_normal((80, 5))
        X[40:] += 1.2
        batch = batch_labels(40)
        train = np.concatenate([np.arange(30), np.arange(40, 70)])
        test = np.setdiff1d(np.arange(80), train)
        adapted_tr, adapted_te, adapters = adapt_blocks(
            X[train], batch[train], single_block(5), n_components=1,
            apply_to=X[test],
        )
        gap_before = np.abs(
            X[test][:10].mean(axis=0) - X[test][10:].mean(axis=0)
        ).max()
        gap_after = np.abs(
            adapted_te[:10].mean(axis=0) - adapted_te[10:].mean(axis=0)
        ).max()
        assert gap_after < 0.5 * gap_before


class TestStackedRegressor:
    def make_blocks(self, widths):
        block_of = np.concatenate(
            [np.full(w, i, dtype=np.int64) for i, w in enumerate(widths)]
        )
        return RegionBlocks(block_of, tuple(f"b{i}" for i in range(len(widths))))

    def test_informative_block_dominates(self):
        rng = seeded_rng(9)
        n = 300
        blocks = self.make_blocks([4, 4, 4])
        X = rng.standard_normal((n, 12))
        y = X[:, :4] @ np.array([1.0, -1.0, 0.5, 0.8])  # block 0 only
        y = y + 0.1 * rng.standard_normal(n)
        model = StackedBlockRegressor(random_state=0).fit(X, y, blocks)
        w = np.abs(model.combiner_.coef_)
        assert w[0] > 5.0 * max(w[1], w[2])

    def test_constant_target_gives_constant_predictions(self):
        rng = seeded_rng(10)
        X = rng.standard_normal((40, 6))
        y = np.full(40, 2.5)
        blocks = self.make_blocks([3, 3])
        model = StackedBlockRegressor(random_state=0).fit(X, y, blocks)
        np.testing.assert_allclose(model.predict(X), 2.5, atol=1e-8)

    def test_noiseless_linear_target_recovered_in_sample(self):
        rng = seeded_rng(11)
        n = 300
        blocks = self.make_blocks([2, 3])
        X = rng.standard_normal((n, 5))
        y = X[:, :2] @ np.array([2.0, 1.0])
        model = StackedBlockRegressor(random_state=1).fit(X, y, blocks)
        pred = model.predict(X)
        r = np.corrcoef(y, pred)[0, 1]
        assert r > 0.99

    def test_combiner_sees_only_out_of_fold_predictions(self):
        # mutating one internal fold's targets must not change that fold's
        # out-of-fold inputs (its rows were predicted without those targets)
        rng = seeded_rng(12)
        n = 60
        blocks = self.make_blocks([3, 3])
        X = rng.standard_normal((n, 6))
        y = X[:, 0] + 0.1 * rng.standard_normal(n)
        model = StackedBlockRegressor(random_state=3).fit(X, y, blocks)
        internal = seeded_rng(3, 7041)
        folds = np.array_split(internal.permutation(n), 5)
        target_fold = folds[2]
        y2 = y.copy()
        y2[target_fold] += 100.0
        model2 = StackedBlockRegressor(random_state=3).fit(X, y2, blocks)
        np.testing.assert_array_equal(
            model.oof_[target_fold], model2.oof_[target_fold]
        )

    def test_too_few_rows_rejected(self):
        blocks = self.make_blocks([2, 2])
        X = np.ones((4, 4))
        with pytest.raises(ValidationError, match="at least"):
            StackedBlockRegressor().fit(X, np.ones(4), blocks)

    def test_single_block_rejected(self):
        X = np.ones((10, 4))
        with pytest.raises(ValidationError, match="2 blocks"):
            StackedBlockRegressor().fit(X, np.ones(10), single_block(4))
