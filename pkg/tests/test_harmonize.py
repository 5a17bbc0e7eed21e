"""ComBat, residualizer and batch diagnostic tests."""

import numpy as np
import pytest

from mtlharm.exceptions import ValidationError
from mtlharm.harmonize import (
    CombatHarmonizer,
    CovariateResidualizer,
    batch_t_diagnostic,
)


def pure_shift_cohort(n_per=60, m=8, shift=2.0, seed=0):
    """Every feature carries exactly the same batch effect: columns are
    within-batch permutations of one base vector, batch 2 adds `shift`."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(n_per)
    X = np.empty((2 * n_per, m))
    for j in range(m):
        X[:n_per, j] = rng.permutation(base)
        X[n_per:, j] = rng.permutation(base) + shift
    batch = np.array(["a"] * n_per + ["b"] * n_per, dtype=object)
    return X, batch


def hetero_shift_cohort(n_per=200, m=30, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2 * n_per, m))
    shifts = 1.0 + 0.5 * rng.standard_normal(m)
    X[n_per:] += shifts
    batch = np.array(["a"] * n_per + ["b"] * n_per, dtype=object)
    return X, batch, shifts


class TestCombatFit:
    def test_single_batch_is_near_identity(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((50, 6)) * 2.0 + 1.0
        batch = np.array(["a"] * 50, dtype=object)
        hz = CombatHarmonizer().fit(X, batch)
        np.testing.assert_allclose(hz.gamma_star_, 0.0, atol=1e-6)
        np.testing.assert_allclose(hz.delta_star_, 1.0, atol=1e-6)
        out = hz.transform(X, batch)
        np.testing.assert_allclose(out, X, atol=1e-6)

    def test_pure_shift_removed_to_float_precision(self):
        X, batch = pure_shift_cohort(shift=2.0)
        hz = CombatHarmonizer().fit(X, batch)
        out = hz.transform(X, batch)
        gap = out[batch == "a"].mean(axis=0) - out[batch == "b"].mean(axis=0)
        assert np.abs(gap).max() < 1e-6 * 2.0

    def test_pure_shift_t_statistics_fall(self):
        X, batch = pure_shift_cohort(shift=1.0, n_per=200)
        t_before = batch_t_diagnostic(X, batch)
        assert np.abs(t_before).min() > 2.0
        hz = CombatHarmonizer().fit(X, batch)
        t_after = batch_t_diagnostic(hz.transform(X, batch), batch)
        assert np.abs(t_after).max() < 0.5

    def test_constant_covariate_rejected(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((40, 4))
        batch = np.array(["a", "b"] * 20, dtype=object)
        with pytest.raises(ValidationError, match="singular"):
            CombatHarmonizer().fit(X, batch, covariates=np.ones((40, 1)))

    def test_single_subject_batch_rejected(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, 3))
        batch = np.array(["a", "a", "a", "a", "b"], dtype=object)
        with pytest.raises(ValidationError, match="at least 2"):
            CombatHarmonizer().fit(X, batch)


class TestCombatApply:
    def test_heldout_application_no_refit(self):
        X, batch, _ = hetero_shift_cohort()
        train = np.concatenate([np.arange(150), np.arange(200, 350)])
        test = np.setdiff1d(np.arange(400), train)
        t_before = np.abs(batch_t_diagnostic(X[test], batch[test])).max()
        hz = CombatHarmonizer().fit(X[train], batch[train])
        out_test = hz.transform(X[test], batch[test])
        t_after = np.abs(batch_t_diagnostic(out_test, batch[test])).max()
        assert t_after < 0.4 * t_before

    def test_unseen_batch_label_named(self):
        X, batch = pure_shift_cohort()
        hz = CombatHarmonizer().fit(X, batch)
        bad = batch.copy()
        bad[0] = "c"
        with pytest.raises(ValidationError, match="c"):
            hz.transform(X, bad)

    def test_covariates_required_at_apply_when_fitted_with_them(self):
        X, batch, _ = hetero_shift_cohort(n_per=50, m=5)
        age = np.random.default_rng(5).uniform(55, 90, 100).reshape(-1, 1)
        hz = CombatHarmonizer().fit(X, batch, covariates=age)
        with pytest.raises(ValidationError, match="covariate"):
            hz.transform(X, batch)

    def test_idempotent_in_distribution(self):
        # measured on the exact-shift construction, where the first pass
        # removes the batch means completely and the second must be a no-op
        X, batch = pure_shift_cohort(shift=2.0)
        pre_gap = np.abs(
            X[batch == "a"].mean(axis=0) - X[batch == "b"].mean(axis=0)
        )
        hz1 = CombatHarmonizer().fit(X, batch)
        once = hz1.transform(X, batch)
        hz2 = CombatHarmonizer().fit(once, batch)
        twice = hz2.transform(once, batch)
        change = np.abs(
            (twice - once)[batch == "a"].mean(axis=0)
            - (twice - once)[batch == "b"].mean(axis=0)
        )
        assert np.all(change < 1e-3 * pre_gap)

    def test_row_column_counts_and_order_preserved(self):
        X, batch, _ = hetero_shift_cohort(n_per=30, m=4)
        hz = CombatHarmonizer().fit(X, batch)
        out = hz.transform(X, batch)
        assert out.shape == X.shape

    def test_fit_ignores_heldout_rows(self):
        X, batch, _ = hetero_shift_cohort(n_per=60, m=5)
        train = np.arange(0, 100)
        hz1 = CombatHarmonizer().fit(X[train], batch[train])
        X2 = X.copy()
        X2[100:] += 50.0
        hz2 = CombatHarmonizer().fit(X2[train], batch[train])
        np.testing.assert_array_equal(hz1.gamma_star_, hz2.gamma_star_)
        np.testing.assert_array_equal(hz1.delta_star_, hz2.delta_star_)


class TestCombatCovariates:
    def covariate_cohort(self, n_per=200, m=12, slope=0.8, seed=6):
        # identical age vectors in both batches make corr(batch, age) exactly 0,
        # and paired noise makes within-batch spreads identical
        rng = np.random.default_rng(seed)
        age = rng.uniform(55.0, 90.0, n_per)
        eps = rng.standard_normal((n_per, m))
        shift = 1.5
        Xa = slope * (age[:, None] - 72.0) / 10.0 + eps
        Xb = Xa + shift
        X = np.vstack([Xa, Xb])
        batch = np.array(["a"] * n_per + ["b"] * n_per, dtype=object)
        ages = np.concatenate([age, age])
        return X, batch, ages

    def test_covariate_slope_preserved(self):
        X, batch, ages = self.covariate_cohort()
        C = ages.reshape(-1, 1)
        hz = CombatHarmonizer().fit(X, batch, covariates=C)
        out = hz.transform(X, batch, covariates=C)
        A = np.column_stack([np.ones(len(ages)), ages])
        slope_before = np.linalg.lstsq(A, X, rcond=None)[0][1]
        slope_after = np.linalg.lstsq(A, out, rcond=None)[0][1]
        rel = np.abs(slope_after - slope_before) / np.abs(slope_before)
        assert rel.max() < 1e-3

    def test_batch_effect_still_removed_with_covariates(self):
        X, batch, ages = self.covariate_cohort()
        C = ages.reshape(-1, 1)
        hz = CombatHarmonizer().fit(X, batch, covariates=C)
        out = hz.transform(X, batch, covariates=C)
        assert np.abs(batch_t_diagnostic(out, batch)).max() < 2.0

    def test_roundtrip_serialization(self):
        X, batch, ages = self.covariate_cohort(n_per=40, m=4)
        C = ages.reshape(-1, 1)
        hz = CombatHarmonizer().fit(X, batch, covariates=C)
        clone = CombatHarmonizer.from_dict(hz.to_dict())
        np.testing.assert_allclose(
            clone.transform(X, batch, covariates=C),
            hz.transform(X, batch, covariates=C),
        )


class TestResidualizer:
    def test_orthogonal_covariate_leaves_feature_centered(self):
        n = 64
        cov = np.linspace(-1, 1, n).reshape(-1, 1)
        feat = np.cos(np.pi * np.arange(n) / n * 2)  # roughly orthogonal to linear
        feat = feat - (feat @ cov[:, 0]) / (cov[:, 0] @ cov[:, 0]) * cov[:, 0]
        X = (feat + 3.0).reshape(-1, 1)
        rz = CovariateResidualizer().fit(X, cov)
        out = rz.transform(X, cov)
        np.testing.assert_allclose(out[:, 0], feat - feat.mean(), atol=1e-10)

    def test_exact_linear_feature_becomes_zero(self):
        age = np.random.default_rng(7).uniform(55, 90, 30)
        X = (2.0 * age).reshape(-1, 1)
        rz = CovariateResidualizer().fit(X, age.reshape(-1, 1))
        np.testing.assert_allclose(rz.transform(X, age.reshape(-1, 1)), 0.0, atol=1e-10)

    def test_residual_orthogonal_to_covariate_on_fit_rows(self):
        rng = np.random.default_rng(8)
        age = rng.uniform(55, 90, 100)
        X = rng.standard_normal((100, 6)) + 0.3 * age[:, None]
        rz = CovariateResidualizer().fit(X, age.reshape(-1, 1))
        out = rz.transform(X, age.reshape(-1, 1))
        inner = np.abs((age - age.mean()) @ out) / len(age)
        assert inner.max() < 1e-8

    def test_rank_deficient_design_rejected(self):
        X = np.random.default_rng(9).standard_normal((20, 2))
        with pytest.raises(ValidationError):
            CovariateResidualizer().fit(X, np.ones((20, 1)))


class TestBatchTDiagnostic:
    def test_identical_moments_give_near_zero(self):
        X, batch = pure_shift_cohort(shift=0.0)
        np.testing.assert_allclose(batch_t_diagnostic(X, batch), 0.0, atol=1e-10)

    def test_unit_shift_matches_analytic_expectation(self):
        rng = np.random.default_rng(10)
        n = 100
        X = np.concatenate([rng.standard_normal(n), rng.standard_normal(n) + 1.0])
        batch = np.array(["a"] * n + ["b"] * n, dtype=object)
        t = batch_t_diagnostic(X.reshape(-1, 1), batch)[0]
        expected = np.sqrt(n / 2.0)  # 7.07 for n = 100
        assert abs(abs(t) - expected) / expected < 0.15

    def test_requires_two_levels(self):
        X = np.random.default_rng(11).standard_normal((10, 2))
        with pytest.raises(ValidationError):
            batch_t_diagnostic(X, np.array(["a"] * 10, dtype=object))

    def test_row_subset(self):
        X, batch, _ = hetero_shift_cohort(n_per=50, m=3)
        rows = np.arange(0, 100, 2)
        t = batch_t_diagnostic(X, batch, rows=rows)
        assert t.shape == (3,)
        assert np.abs(t).max() > 2.0
