"""Metrics, stratified folds, bootstrap intervals and the nested CV harness.

The harness runs repeated, nested k-fold cross-validation: standardization and
harmonization are fitted on each outer-training split only, hyperparameters
are selected on inner folds (CV mean squared error for the elastic-net
methods, root-mean-square error for the multitask methods, ties broken toward
the stronger penalty), and metrics are reported per diagnostic group and
pooled, with percentile-bootstrap confidence intervals over the per-subject
repeat-averaged predictions.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, FeatureStandardizer
from .exceptions import ConfigError, UndefinedMetricError, ValidationError
from .harmonize import CombatHarmonizer, CovariateResidualizer
from .pls import PLS_COMPONENT_CANDIDATES, RegionBlocks, adapt_blocks, single_block
from .solvers import (
    DirtyModel,
    ElasticNetRegressor,
    JointFeatureSelection,
    MultiTaskLasso,
    TraceNormRegressor,
    default_alpha_grid,
    elastic_net_path,
)
from .validation import seeded_rng

__all__ = [
    "pearson_r",
    "mae",
    "stratified_folds",
    "bootstrap_ci",
    "SearchGrid",
    "GroupResult",
    "EvalReport",
    "nested_cv",
    "METHODS",
    "HARMONIZATIONS",
    "PARTITIONS",
    "canonical_method",
    "canonical_harmonization",
    "canonical_partition",
    "LOW_N_THRESHOLD",
    "REPORT_CSV_COLUMNS",
]

POOLED_GROUP = "ALL"
LOW_N_THRESHOLD = 20

METHODS = ("sep_en", "all_en", "mt_lasso", "jfs", "dirty", "trace_norm")
HARMONIZATIONS = ("none", "combat", "combat_age", "combat_reg_age", "pls", "pls_age")
PARTITIONS = ("by_group", "by_group_and_batch", "pooled")

_METHOD_ALIASES = {
    "sep_en": "sep_en", "sepen": "sep_en",
    "all_en": "all_en", "allen": "all_en",
    "mt_lasso": "mt_lasso", "mtlasso": "mt_lasso", "least_lasso": "mt_lasso",
    "jfs": "jfs", "joint_feature_selection": "jfs",
    "dirty": "dirty", "dirty_model": "dirty",
    "trace_norm": "trace_norm", "trace": "trace_norm", "tracenorm": "trace_norm",
    "lra": "trace_norm", "low_rank": "trace_norm",
}
_HARMONIZATION_ALIASES = {
    "none": "none", "": "none",
    "combat": "combat",
    "combat_age": "combat_age",
    "combat_reg_age": "combat_reg_age", "combat_regage": "combat_reg_age",
    "pls": "pls",
    "pls_age": "pls_age",
}
_PARTITION_ALIASES = {
    "by_group": "by_group", "group": "by_group",
    "by_group_and_batch": "by_group_and_batch", "group_and_batch": "by_group_and_batch",
    "pooled": "pooled", "all": "pooled",
}


def _canon(name, aliases, what):
    key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
    if key not in aliases:
        raise ConfigError(f"unknown {what} {name!r}; expected one of {sorted(set(aliases.values()))}")
    return aliases[key]


def canonical_method(name):
    return _canon(name, _METHOD_ALIASES, "method")


def canonical_harmonization(name):
    return _canon(name, _HARMONIZATION_ALIASES, "harmonization")


def canonical_partition(name):
    return _canon(name, _PARTITION_ALIASES, "partition scheme")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pearson_r(y, yhat):
    """Sample Pearson correlation; undefined inputs raise, never return 0."""
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValidationError("pearson_r needs vectors of equal length")
    if y.size < 3:
        raise UndefinedMetricError(f"pearson_r needs at least 3 points, got {y.size}")
    yc = y - y.mean()
    hc = yhat - yhat.mean()
    sy = float(np.sqrt(yc @ yc))
    sh = float(np.sqrt(hc @ hc))
    if sy == 0.0 or sh == 0.0:
        raise UndefinedMetricError("pearson_r is undefined for constant input")
    return float(yc @ hc) / (sy * sh)


def mae(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValidationError("mae needs vectors of equal length")
    if y.size == 0:
        raise ValidationError("mae is undefined on empty input")
    return float(np.mean(np.abs(y - yhat)))


def stratified_folds(targets, k, seed):
    """Target-stratified fold assignment over the non-missing entries.

    Subjects are sorted by target, grouped into consecutive bins of size k,
    and each bin is dealt one subject per fold with seeded within-bin
    shuffling.  Returns k sorted index arrays that partition the non-missing
    subjects; fold sizes differ by at most one.
    """
    t = np.asarray(targets, dtype=np.float64).ravel()
    usable = np.flatnonzero(np.isfinite(t))
    k = int(k)
    if k < 2:
        raise ValidationError("need at least 2 folds")
    if usable.size < k:
        raise ValidationError(
            f"only {usable.size} usable subjects for {k} folds"
        )
    order = usable[np.argsort(t[usable], kind="stable")]
    rng = seeded_rng(seed, 7200)
    folds = [[] for _ in range(k)]
    for start in range(0, order.size, k):
        chunk = order[start:start + k]
        for f, subj in zip(rng.permutation(k)[: chunk.size], chunk):
            folds[f].append(int(subj))
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


_METRIC_FNS = {"pearson": pearson_r, "mae": mae}


def bootstrap_ci(y, yhat, metric="pearson", n_boot=1000, level=0.95, seed=0):
    """Percentile bootstrap CI, resampling subjects with replacement.

    Inputs are the pooled per-subject (repeat-averaged) prediction/target
    pairs.  Resamples where the metric is undefined are skipped; more than 20%
    undefined raises.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValidationError("bootstrap_ci needs vectors of equal length")
    n = y.size
    if n < 10:
        raise ValidationError(f"bootstrap_ci needs at least 10 subjects, got {n}")
    fn = _METRIC_FNS[metric] if isinstance(metric, str) else metric
    rng = seeded_rng(seed, 7100)
    stats = np.full(int(n_boot), np.nan)
    for b in range(int(n_boot)):
        idx = rng.integers(0, n, size=n)
        try:
            stats[b] = fn(y[idx], yhat[idx])
        except UndefinedMetricError:
            continue
    ok = np.isfinite(stats)
    if ok.mean() < 0.8:
        raise UndefinedMetricError(
            f"metric undefined on {(~ok).mean():.0%} of bootstrap resamples"
        )
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats[ok], [tail, 100.0 - tail])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# hyperparameter grids
# ---------------------------------------------------------------------------

def _default_rho1():
    return tuple(np.concatenate([10.0 ** np.arange(-3.0, 2.01, 0.5),
                                 np.arange(200.0, 501.0, 50.0)]))


def _default_rho2():
    return tuple(np.concatenate([10.0 ** np.arange(-3.0, 2.01, 0.5),
                                 np.arange(200.0, 1001.0, 50.0)]))


@dataclass(frozen=True)
class SearchGrid:
    """Hyperparameter candidate sets for the inner CV loop."""

    rho1: tuple = field(default_factory=_default_rho1)
    rho2: tuple = field(default_factory=_default_rho2)
    n_alphas: int = 100
    alpha_min_ratio: float = 1e-4
    l1_ratio: float = 0.5
    pls_components: object = "auto"  # int or "auto"
    pls_candidates: tuple = PLS_COMPONENT_CANDIDATES

    def __post_init__(self):
        for name in ("rho1", "rho2"):
            vals = np.asarray(getattr(self, name), dtype=np.float64)
            if vals.size == 0 or np.any(vals <= 0.0) or np.any(np.diff(vals) <= 0.0):
                raise ConfigError(f"{name} grid must be positive and strictly ascending")
        if self.pls_components != "auto":
            k = int(self.pls_components)
            if k < 1:
                raise ConfigError("pls_components must be 'auto' or a positive integer")


# ---------------------------------------------------------------------------
# report containers
# ---------------------------------------------------------------------------

REPORT_CSV_COLUMNS = [
    "method", "horizon", "partition", "harmonization", "group", "n", "low_n",
    "r_mean", "r_lo", "r_hi", "mae_mean", "mae_lo", "mae_hi",
]


@dataclass
class GroupResult:
    n: int
    low_n: bool
    r_per_repeat: list
    mae_per_repeat: list
    r_mean: object
    mae_mean: object
    r_ci: object
    mae_ci: object

    def to_dict(self):
        return {
            "n": self.n,
            "low_n": self.low_n,
            "r_per_repeat": self.r_per_repeat,
            "mae_per_repeat": self.mae_per_repeat,
            "r_mean": self.r_mean,
            "mae_mean": self.mae_mean,
            "r_ci": list(self.r_ci) if self.r_ci is not None else None,
            "mae_ci": list(self.mae_ci) if self.mae_ci is not None else None,
        }


@dataclass
class EvalReport:
    method: str
    horizon: str
    partition: str
    harmonization: str
    repeats: int
    seed: int
    groups: dict

    def to_dict(self):
        return {
            "method": self.method,
            "horizon": self.horizon,
            "partition": self.partition,
            "harmonization": self.harmonization,
            "repeats": self.repeats,
            "seed": self.seed,
            "groups": {g: gr.to_dict() for g, gr in self.groups.items()},
        }

    def to_json_bytes(self, provenance=None) -> bytes:
        doc = self.to_dict()
        if provenance:
            doc["provenance"] = provenance
        return json.dumps(doc, sort_keys=True, indent=2).encode("utf-8")

    def csv_rows(self):
        rows = []
        for g, gr in self.groups.items():
            rows.append({
                "method": self.method,
                "horizon": self.horizon,
                "partition": self.partition,
                "harmonization": self.harmonization,
                "group": g,
                "n": gr.n,
                "low_n": int(gr.low_n),
                "r_mean": gr.r_mean,
                "r_lo": None if gr.r_ci is None else gr.r_ci[0],
                "r_hi": None if gr.r_ci is None else gr.r_ci[1],
                "mae_mean": gr.mae_mean,
                "mae_lo": None if gr.mae_ci is None else gr.mae_ci[0],
                "mae_hi": None if gr.mae_ci is None else gr.mae_ci[1],
            })
        return rows


# ---------------------------------------------------------------------------
# inner-loop machinery (module level so repeats can run in worker processes)
# ---------------------------------------------------------------------------

def _cv_select_alpha(X, y, l1_ratio, n_alphas, min_ratio, k, seed):
    """Elastic-net penalty selected by inner-CV MSE; ties favor larger alpha."""
    alphas = default_alpha_grid(X, y, l1_ratio, n_alphas, min_ratio)
    n = X.shape[0]
    k_eff = min(int(k), n)
    if n < 4 or k_eff < 2:
        return float(alphas[len(alphas) // 2])
    folds = stratified_folds(y, k_eff, seed)
    sse = np.zeros(len(alphas))
    for fold in folds:
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        if mask.sum() < 2:
            continue
        coefs, intercepts = elastic_net_path(X[mask], y[mask], alphas, l1_ratio)
        preds = X[fold] @ coefs.T + intercepts
        sse += ((preds - y[fold][:, None]) ** 2).sum(axis=0)
    return float(alphas[int(np.argmin(sse))])  # descending path: argmin keeps largest tie


def _cell_keys(groups, batches, scheme):
    if scheme == "by_group":
        return [(g,) for g in groups]
    return list(zip(groups, batches))


def _task_maps(keys_tr, keys_te, scheme):
    """Task indices from the cells present in the training keys.

    Test rows whose cell has no training member get task -1.
    """
    if scheme == "pooled":
        return (
            np.zeros(len(keys_tr), dtype=np.int64),
            np.zeros(len(keys_te), dtype=np.int64),
        )
    present = sorted(set(keys_tr))
    index = {key: i for i, key in enumerate(present)}
    tasks_tr = np.asarray([index[k] for k in keys_tr], dtype=np.int64)
    tasks_te = np.asarray([index.get(k, -1) for k in keys_te], dtype=np.int64)
    return tasks_tr, tasks_te


_MTL_CLASSES = {
    "mt_lasso": MultiTaskLasso,
    "jfs": JointFeatureSelection,
    "dirty": DirtyModel,
    "trace_norm": TraceNormRegressor,
}


def _mtl_candidates(method, grid):
    rho1 = sorted(grid.rho1, reverse=True)
    if method == "trace_norm":
        return [(r1, 0.0) for r1 in rho1]
    rho2 = sorted(grid.rho2, reverse=True)
    return [(r1, r2) for r1 in rho1 for r2 in rho2]


def _fit_predict_mtl(method, Xtr, ytr, Xte, gtr, btr, gte, bte,
                     scheme, grid, inner_k, seed):
    keys_tr = _cell_keys(gtr, btr, scheme) if scheme != "pooled" else []
    keys_te = _cell_keys(gte, bte, scheme) if scheme != "pooled" else []
    if scheme == "pooled":
        tasks_tr = np.zeros(Xtr.shape[0], dtype=np.int64)
        tasks_te = np.zeros(Xte.shape[0], dtype=np.int64)
    else:
        tasks_tr, tasks_te = _task_maps(keys_tr, keys_te, scheme)
    cls = _MTL_CLASSES[method]
    candidates = _mtl_candidates(method, grid)
    best = candidates[0]
    if len(candidates) > 1:
        n = Xtr.shape[0]
        k_eff = min(int(inner_k), n)
        folds = stratified_folds(ytr, k_eff, seed) if (n >= 4 and k_eff >= 2) else []
        best_rmse = np.inf
        for r1, r2 in candidates:
            sse, count = 0.0, 0
            for fold in folds:
                mask = np.ones(n, dtype=bool)
                mask[fold] = False
                in_idx = np.flatnonzero(mask)
                if scheme == "pooled":
                    t_in = np.zeros(in_idx.size, dtype=np.int64)
                    t_val = np.zeros(fold.size, dtype=np.int64)
                else:
                    t_in, t_val = _task_maps(
                        [keys_tr[i] for i in in_idx],
                        [keys_tr[i] for i in fold],
                        scheme,
                    )
                ok = t_val >= 0
                if not np.any(ok):
                    continue
                model = cls(rho1=r1, rho2=r2).fit(Xtr[in_idx], ytr[in_idx], t_in)
                pred = model.predict(Xtr[fold][ok], tasks=t_val[ok])
                sse += float(((pred - ytr[fold][ok]) ** 2).sum())
                count += int(ok.sum())
            rmse = np.sqrt(sse / count) if count else np.inf
            if rmse < best_rmse:
                best, best_rmse = (r1, r2), rmse
    model = cls(rho1=best[0], rho2=best[1]).fit(Xtr, ytr, tasks_tr)
    preds = np.full(Xte.shape[0], np.nan)
    ok = tasks_te >= 0
    if np.any(ok):
        preds[ok] = model.predict(Xte[ok], tasks=tasks_te[ok])
    return preds


def _fit_predict_en(method, Xtr, ytr, Xte, gtr, gte, grid, inner_k, seed):
    preds = np.full(Xte.shape[0], np.nan)
    if method == "all_en":
        alpha = _cv_select_alpha(Xtr, ytr, grid.l1_ratio, grid.n_alphas,
                                 grid.alpha_min_ratio, inner_k, seed)
        model = ElasticNetRegressor(alpha=alpha, l1_ratio=grid.l1_ratio).fit(Xtr, ytr)
        return model.predict(Xte)
    for gi, g in enumerate(sorted(set(gtr))):
        rows = np.flatnonzero(np.asarray(gtr, dtype=object) == g)
        te_rows = np.flatnonzero(np.asarray(gte, dtype=object) == g)
        if rows.size < 2:
            continue
        alpha = _cv_select_alpha(Xtr[rows], ytr[rows], grid.l1_ratio, grid.n_alphas,
                                 grid.alpha_min_ratio, inner_k, (seed, gi))
        model = ElasticNetRegressor(alpha=alpha, l1_ratio=grid.l1_ratio).fit(Xtr[rows], ytr[rows])
        if te_rows.size:
            preds[te_rows] = model.predict(Xte[te_rows])
    return preds


def _ridge_probe_mse(Xtr, ytr, Xval, yval, alpha=1.0):
    mx, my = Xtr.mean(axis=0), ytr.mean()
    sd = Xtr.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (Xtr - mx) / sd
    w = np.linalg.solve(Z.T @ Z + alpha * np.eye(Z.shape[1]), Z.T @ (ytr - my))
    pred = ((Xval - mx) / sd) @ w + my
    return float(np.mean((pred - yval) ** 2))


def _select_pls_components(X, y, batch, age, blocks, candidates, seed):
    """Pick the removed-component count by 3-fold ridge-probe CV MSE."""
    n = X.shape[0]
    max_width = max(blocks.columns(b).size for b in range(blocks.n_blocks))
    capped = sorted(set(min(int(k), max_width, max(1, n - n // 3 - 1))
                        for k in candidates))
    if len(capped) == 1:
        return capped[0]
    rng = seeded_rng(*seed, 7300)
    order = rng.permutation(n)
    folds = np.array_split(order, 3)
    best_k, best_mse = capped[0], np.inf
    for k in capped:
        total = 0.0
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            tr = np.flatnonzero(mask)
            if tr.size < 3 or len(set(batch[tr])) != 2:
                return capped[0]
            a_tr = None if age is None else age[tr]
            Xa_tr, Xa_val, _ = adapt_blocks(
                X[tr], batch[tr], blocks, n_components=k, age=a_tr,
                apply_to=X[fold],
            )
            total += _ridge_probe_mse(Xa_tr, y[tr], Xa_val, y[fold])
        if total < best_mse - 1e-12:
            best_k, best_mse = k, total
    return best_k


def _harmonize_split(harm, X, batch, age, tr, te, blocks, grid, y, seed):
    """Fit the harmonization on the training rows; apply to train and test."""
    if harm == "none":
        return X[tr], X[te]
    if harm.startswith("combat"):
        cov_tr = age[tr].reshape(-1, 1) if harm != "combat" else None
        cov_te = age[te].reshape(-1, 1) if harm != "combat" else None
        hz = CombatHarmonizer().fit(X[tr], batch[tr], covariates=cov_tr)
        Xtr = hz.transform(X[tr], batch[tr], covariates=cov_tr)
        Xte = hz.transform(X[te], batch[te], covariates=cov_te)
        if harm == "combat_reg_age":
            rz = CovariateResidualizer().fit(Xtr, age[tr].reshape(-1, 1))
            Xtr = rz.transform(Xtr, age[tr].reshape(-1, 1))
            Xte = rz.transform(Xte, age[te].reshape(-1, 1))
        return Xtr, Xte
    # pls / pls_age
    a_tr = age[tr] if harm == "pls_age" else None
    if grid.pls_components == "auto":
        k = _select_pls_components(X[tr], y[tr], batch[tr], a_tr, blocks,
                                   grid.pls_candidates, seed)
    else:
        k = int(grid.pls_components)
    Xtr, Xte, _ = adapt_blocks(X[tr], batch[tr], blocks, n_components=k,
                               age=a_tr, apply_to=X[te])
    return Xtr, Xte


def _run_repeat(payload):
    """One CV repeat: returns (repeat index, per-subject predictions)."""
    X = payload["X"]
    y = payload["y"]
    groups = payload["groups"]
    batch = payload["batch"]
    age = payload["age"]
    method = payload["method"]
    harm = payload["harmonization"]
    scheme = payload["partition"]
    grid = payload["grid"]
    blocks = RegionBlocks(payload["block_of"], payload["block_names"])
    seed = payload["seed"]
    rep = payload["repeat"]
    k_outer = payload["outer_folds"]
    k_inner = payload["inner_folds"]

    n = X.shape[0]
    preds = np.full(n, np.nan)
    folds = stratified_folds(y, k_outer, (seed, 101, rep))
    usable = np.flatnonzero(np.isfinite(y))
    for j, te in enumerate(folds):
        tr = np.setdiff1d(usable, te)
        Xtr_h, Xte_h = _harmonize_split(
            harm, X, batch, age, tr, te, blocks, grid, y, (seed, 104, rep, j)
        )
        std = FeatureStandardizer().fit(Xtr_h)
        Xtr = std.transform(Xtr_h)
        Xte = std.transform(Xte_h)
        ytr = y[tr]
        if method in ("all_en", "sep_en"):
            p = _fit_predict_en(
                method, Xtr, ytr, Xte, groups[tr], groups[te], grid, k_inner,
                (seed, 102, rep, j),
            )
        else:
            p = _fit_predict_mtl(
                method, Xtr, ytr, Xte, groups[tr], batch[tr], groups[te],
                batch[te], scheme, grid, k_inner, (seed, 103, rep, j),
            )
        preds[te] = p
    return rep, preds


def _metric_or_nan(fn, y, yhat):
    try:
        return fn(y, yhat)
    except UndefinedMetricError:
        return np.nan


def nested_cv(cohort: Cohort, method, horizon, *, partition="by_group",
              harmonization="none", grid=None, repeats=10, outer_folds=10,
              inner_folds=10, seed=0, jobs=1, blocks=None,
              harmonization_scope="per_fold", n_boot=1000) -> EvalReport:
    """Repeated nested cross-validation for one method/harmonization/horizon.

    Group metrics use each repeat's pooled out-of-fold predictions; the
    reported means average over repeats and the bootstrap intervals resample
    subjects of the repeat-averaged predictions.  Identical seeds give
    bitwise-identical reports regardless of `jobs`.
    """
    method = canonical_method(method)
    harmonization = canonical_harmonization(harmonization)
    partition = canonical_partition(partition)
    if harmonization_scope not in ("per_fold", "global"):
        raise ConfigError(f"unknown harmonization_scope {harmonization_scope!r}")
    grid = grid or SearchGrid()
    horizon = str(horizon)
    y = cohort.targets.get(horizon)
    if y is None:
        raise ConfigError(f"unknown horizon {horizon!r}; have {list(cohort.targets)}")
    blocks = blocks or single_block(cohort.n_features)
    X = np.asarray(cohort.features, dtype=np.float64)
    usable = cohort.usable(horizon)

    harm_payload = harmonization
    if harmonization_scope == "global" and harmonization != "none":
        Xtr_h, _ = _harmonize_split(
            harmonization, X, cohort.batch, cohort.age, usable, usable[:1],
            blocks, grid, y, (seed, 105),
        )
        X = X.copy()
        X[usable] = Xtr_h
        harm_payload = "none"

    payloads = [
        {
            "X": X,
            "y": np.asarray(y, dtype=np.float64),
            "groups": np.asarray(cohort.group, dtype=object),
            "batch": np.asarray(cohort.batch, dtype=object),
            "age": np.asarray(cohort.age, dtype=np.float64),
            "method": method,
            "harmonization": harm_payload,
            "partition": partition,
            "grid": grid,
            "block_of": np.asarray(blocks.block_of),
            "block_names": blocks.block_names,
            "seed": int(seed),
            "repeat": rep,
            "outer_folds": int(outer_folds),
            "inner_folds": int(inner_folds),
        }
        for rep in range(int(repeats))
    ]
    results = [None] * int(repeats)
    if int(jobs) > 1 and int(repeats) > 1:
        with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
            for rep, preds in pool.map(_run_repeat, payloads):
                results[rep] = preds
    else:
        for payload in payloads:
            rep, preds = _run_repeat(payload)
            results[rep] = preds
    preds_by_repeat = np.vstack(results)

    group_names = cohort.group_levels() + [POOLED_GROUP]
    yv = np.asarray(y, dtype=np.float64)
    groups_arr = np.asarray(cohort.group, dtype=object)
    report_groups = {}
    for gi, g in enumerate(group_names):
        if g == POOLED_GROUP:
            members = usable
        else:
            members = usable[groups_arr[usable] == g]
        r_list, m_list = [], []
        for rep in range(int(repeats)):
            p = preds_by_repeat[rep, members]
            ok = np.isfinite(p)
            if ok.sum() >= 1:
                m_list.append(_metric_or_nan(mae, yv[members][ok], p[ok]))
            else:
                m_list.append(np.nan)
            if ok.sum() >= 3:
                r_list.append(_metric_or_nan(pearson_r, yv[members][ok], p[ok]))
            else:
                r_list.append(np.nan)
        with np.errstate(invalid="ignore"):
            avg = np.nanmean(preds_by_repeat[:, members], axis=0) if members.size else np.asarray([])
        ok = np.isfinite(avg)
        r_ci = mae_ci = None
        if ok.sum() >= 10:
            try:
                r_ci = bootstrap_ci(yv[members][ok], avg[ok], "pearson",
                                    n_boot=n_boot, seed=(seed, 106, gi))
            except UndefinedMetricError:
                r_ci = None
            mae_ci = bootstrap_ci(yv[members][ok], avg[ok], "mae",
                                  n_boot=n_boot, seed=(seed, 107, gi))
        r_arr = np.asarray(r_list)
        m_arr = np.asarray(m_list)
        report_groups[g] = GroupResult(
            n=int(members.size),
            low_n=bool(members.size < LOW_N_THRESHOLD),
            r_per_repeat=[None if np.isnan(v) else float(v) for v in r_arr],
            mae_per_repeat=[None if np.isnan(v) else float(v) for v in m_arr],
            r_mean=None if np.all(np.isnan(r_arr)) else float(np.nanmean(r_arr)),
            mae_mean=None if np.all(np.isnan(m_arr)) else float(np.nanmean(m_arr)),
            r_ci=r_ci,
            mae_ci=mae_ci,
        )
    return EvalReport(
        method=method,
        horizon=horizon,
        partition=partition,
        harmonization=harmonization,
        repeats=int(repeats),
        seed=int(seed),
        groups=report_groups,
    )
