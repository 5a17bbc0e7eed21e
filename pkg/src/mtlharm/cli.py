"""Command-line entry point.

Subcommands: simulate, harmonize, fit, predict, evaluate, report.  All runs
are driven by an INI-style config file; --seed/--out/--jobs override the
config.  Exit codes: 0 success, 2 usage/config error, 3 data validation
error, 4 numerical failure.  stderr carries diagnostics, stdout only output
paths.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .cohort import FeatureStandardizer, load_cohort, partition_tasks
from .evaluation import (
    REPORT_CSV_COLUMNS,
    SearchGrid,
    canonical_harmonization,
    canonical_method,
    canonical_partition,
    nested_cv,
)
from .exceptions import ConfigError, NumericalError, ValidationError
from .harmonize import CombatHarmonizer, CovariateResidualizer, batch_t_diagnostic
from .pls import adapt_blocks, load_block_map, single_block
from .solvers import (
    DirtyModel,
    ElasticNetRegressor,
    JointFeatureSelection,
    MultiTaskLasso,
    TraceNormRegressor,
)
from .synth import SynthSpec, generate

MODEL_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

class RunConfig:
    def __init__(self, path, overrides):
        self.path = Path(path)
        if not self.path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = self.path.read_bytes()
        self.sha256 = hashlib.sha256(raw).hexdigest()
        self.parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            self.parser.read_string(raw.decode("utf-8"))
        except (configparser.Error, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        self.overrides = overrides

    def get(self, section, key, default=None, required=False):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        if required:
            raise ConfigError(f"config is missing [{section}] {key}")
        return default

    def get_int(self, section, key, default=None, required=False):
        v = self.get(section, key, None, required)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}") from None

    def get_float(self, section, key, default=None, required=False):
        v = self.get(section, key, None, required)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {v!r}") from None

    def get_bool(self, section, key, default=False):
        v = self.get(section, key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {v!r}")

    def get_list(self, section, key, default=None, cast=str):
        v = self.get(section, key)
        if v is None:
            return default
        try:
            return [cast(part.strip()) for part in v.split(",") if part.strip() != ""]
        except ValueError:
            raise ConfigError(f"[{section}] {key} has a malformed list: {v!r}") from None

    @property
    def seed(self):
        if self.overrides.seed is not None:
            return int(self.overrides.seed)
        seed = self.get_int("run", "seed")
        if seed is None:
            raise ConfigError("a seed is required: set [run] seed or pass --seed")
        return seed

    @property
    def out_dir(self) -> Path:
        out = self.overrides.out or self.get("run", "out", ".")
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def jobs(self):
        if self.overrides.jobs is not None:
            return max(1, int(self.overrides.jobs))
        return max(1, self.get_int("run", "jobs", 1))

    def provenance(self):
        return {"config_sha256": self.sha256, "seed": self.seed}


def _provenance_line(cfg):
    return f"# provenance: config_sha256={cfg.sha256} seed={cfg.seed}"


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows, cfg):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_provenance_line(cfg) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, doc, cfg):
    doc = dict(doc)
    doc["provenance"] = cfg.provenance()
    Path(path).write_bytes(json.dumps(doc, sort_keys=True, indent=2).encode("utf-8"))


def _load_data(cfg):
    features = cfg.get("data", "features", required=True)
    targets = cfg.get("data", "targets", required=True)
    for path in (features, targets):
        if not Path(path).exists():
            raise ConfigError(f"input file not found: {path}")
    return load_cohort(features, targets)


def _load_blocks(cfg, cohort):
    path = cfg.get("data", "block_map")
    if path:
        if not Path(path).exists():
            raise ConfigError(f"block map not found: {path}")
        return load_block_map(path, cohort.feature_names)
    return single_block(cohort.n_features)


def _grid_from_config(cfg):
    kwargs = {}
    rho1 = cfg.get_list("grid", "rho1", cast=float)
    rho2 = cfg.get_list("grid", "rho2", cast=float)
    if rho1:
        kwargs["rho1"] = tuple(sorted(rho1))
    if rho2:
        kwargs["rho2"] = tuple(sorted(rho2))
    n_alphas = cfg.get_int("grid", "n_alphas")
    if n_alphas:
        kwargs["n_alphas"] = n_alphas
    min_ratio = cfg.get_float("grid", "alpha_min_ratio")
    if min_ratio:
        kwargs["alpha_min_ratio"] = min_ratio
    l1_ratio = cfg.get_float("grid", "l1_ratio")
    if l1_ratio is not None:
        kwargs["l1_ratio"] = l1_ratio
    pls_k = cfg.get("grid", "pls_components")
    if pls_k and pls_k != "auto":
        try:
            kwargs["pls_components"] = int(pls_k)
        except ValueError:
            raise ConfigError(
                f"[grid] pls_components must be 'auto' or an integer, got {pls_k!r}"
            ) from None
    return SearchGrid(**kwargs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    sec = "simulate"
    groups = tuple(cfg.get_list(sec, "groups", ["NC", "MCI", "AD"]))
    batches = tuple(cfg.get_list(sec, "batches", ["1.5T", "3.0T"]))
    horizons = tuple(str(h) for h in cfg.get_list(sec, "horizons", ["12", "24", "36"]))
    n_h = len(horizons)
    spec = SynthSpec(
        groups=groups,
        batches=batches,
        n_per_cell=cfg.get_int(sec, "n_per_cell", 40),
        m_features=cfg.get_int(sec, "m_features", 122),
        block_size=cfg.get_int(sec, "block_size", 6),
        shared_support=cfg.get_int(sec, "shared_support", 5),
        task_support=cfg.get_int(sec, "task_support", 2),
        coef_scale=cfg.get_float(sec, "coef_scale", 1.0),
        noise_sd=cfg.get_float(sec, "noise_sd", 1.0),
        batch_shift=tuple(cfg.get_list(sec, "batch_shift", [0.0] * len(batches), float)),
        batch_scale=tuple(cfg.get_list(sec, "batch_scale", [1.0] * len(batches), float)),
        batch_shift_jitter=cfg.get_float(sec, "batch_shift_jitter", 0.0),
        age_slope=cfg.get_float(sec, "age_slope", 0.0),
        ar1_corr=cfg.get_float(sec, "ar1_corr", 0.3),
        horizons=horizons,
        horizon_scale=tuple(cfg.get_list(sec, "horizon_scale", [1.0] * n_h, float)),
        missing_rate=tuple(cfg.get_list(sec, "missing_rate", [0.0] * n_h, float)),
        group_feature_shift=tuple(cfg.get_list(sec, "group_feature_shift", [], float)),
        group_target_offset=tuple(cfg.get_list(sec, "group_target_offset", [], float)),
        paired_batches=cfg.get_bool(sec, "paired_batches", False),
        seed=cfg.seed,
    )
    cohort, truth = generate(spec)
    out = cfg.out_dir
    feat_path = out / "features.csv"
    header = list(("subject_id", "group", "batch", "age")) + list(cohort.feature_names)
    rows = [
        [sid, g, b, _fmt(float(a))] + [_fmt(float(v)) for v in x]
        for sid, g, b, a, x in zip(
            cohort.subject_ids, cohort.group, cohort.batch, cohort.age, cohort.features
        )
    ]
    _write_csv(feat_path, header, rows, cfg)
    targ_path = out / "targets.csv"
    theader = ["subject_id"] + [f"delta_{h}" for h in cohort.horizons]
    trows = []
    for i, sid in enumerate(cohort.subject_ids):
        row = [sid]
        for h in cohort.horizons:
            v = cohort.targets[h][i]
            row.append("" if np.isnan(v) else _fmt(float(v)))
        trows.append(row)
    _write_csv(targ_path, theader, trows, cfg)
    blocks = truth["blocks"]
    block_path = out / "blockmap.csv"
    _write_csv(
        block_path,
        ["feature_name", "block_name"],
        [
            [fname, blocks.block_names[blocks.block_of[j]]]
            for j, fname in enumerate(cohort.feature_names)
        ],
        cfg,
    )
    truth_path = out / "truth.json"
    _write_json(
        truth_path,
        {
            "W_true": truth["W_true"].tolist(),
            "gamma": truth["gamma"].tolist(),
            "delta": truth["delta"].tolist(),
            "age_slope": truth["age_slope"],
            "shared_support": truth["shared_support"].tolist(),
            "group_target_offset": truth["group_target_offset"].tolist(),
        },
        cfg,
    )
    for p in (feat_path, targ_path, block_path, truth_path):
        print(p)
    return 0


_HARMONIZE_METHODS = ("combat", "combat_age", "combat_reg_age", "pls", "pls_age")


def cmd_harmonize(cfg):
    method = canonical_harmonization(cfg.get("harmonize", "method", required=True))
    if method not in _HARMONIZE_METHODS:
        raise ConfigError(
            f"harmonize method must be one of {_HARMONIZE_METHODS}, got {method!r}"
        )
    cohort = _load_data(cfg)
    X = np.asarray(cohort.features)
    batch = np.asarray(cohort.batch, dtype=object)
    age = np.asarray(cohort.age)
    out = cfg.out_dir
    params_doc = {"method": method}
    if method.startswith("combat"):
        cov = age.reshape(-1, 1) if method != "combat" else None
        hz = CombatHarmonizer().fit(X, batch, covariates=cov)
        Xh = hz.transform(X, batch, covariates=cov)
        params_doc["combat"] = hz.to_dict()
        if method == "combat_reg_age":
            rz = CovariateResidualizer().fit(Xh, age.reshape(-1, 1))
            Xh = rz.transform(Xh, age.reshape(-1, 1))
            params_doc["residualizer"] = {
                "intercept": rz.intercept_.tolist(),
                "covariate_coef": rz.covariate_coef_.tolist(),
            }
    else:
        blocks = _load_blocks(cfg, cohort)
        k = cfg.get_int("harmonize", "pls_components", 1)
        use_age = age if method == "pls_age" else None
        Xh, _, adapters = adapt_blocks(X, batch, blocks, n_components=k, age=use_age)
        params_doc["pls"] = {
            "n_components": k,
            "blocks": list(blocks.block_names),
            "x_loadings": [a.pls_.x_loadings_.tolist() for a in adapters],
            "x_rotations": [a.pls_.x_rotations_.tolist() for a in adapters],
            "x_mean": [a.pls_.x_mean_.tolist() for a in adapters],
        }

    feat_path = out / "features_harmonized.csv"
    header = list(("subject_id", "group", "batch", "age")) + list(cohort.feature_names)
    rows = [
        [sid, g, b, _fmt(float(a))] + [_fmt(float(v)) for v in x]
        for sid, g, b, a, x in zip(
            cohort.subject_ids, cohort.group, cohort.batch, cohort.age, Xh
        )
    ]
    _write_csv(feat_path, header, rows, cfg)
    params_path = out / "harmonization.json"
    _write_json(params_path, params_doc, cfg)

    diag_path = out / "diagnostic.csv"
    if len(set(batch)) == 2:
        t_before = batch_t_diagnostic(X, batch)
        t_after = batch_t_diagnostic(Xh, batch)
        _write_csv(
            diag_path,
            ["feature_name", "t_before", "t_after"],
            [
                [fname, _fmt(float(tb)), _fmt(float(ta))]
                for fname, tb, ta in zip(cohort.feature_names, t_before, t_after)
            ],
            cfg,
        )
    else:
        print("diagnostic skipped: need exactly 2 batch levels", file=sys.stderr)
        _write_csv(diag_path, ["feature_name", "t_before", "t_after"], [], cfg)
    for p in (feat_path, params_path, diag_path):
        print(p)
    return 0


_FIT_CLASSES = {
    "mt_lasso": MultiTaskLasso,
    "jfs": JointFeatureSelection,
    "dirty": DirtyModel,
    "trace_norm": TraceNormRegressor,
}


def _model_tasks(cohort, method, partition):
    if method == "all_en":
        scheme = "pooled"
    elif method == "sep_en":
        scheme = "by_group"
    else:
        scheme = partition
    part = partition_tasks(cohort, scheme)
    return np.asarray(part.task_of), part.task_names, scheme


def cmd_fit(cfg):
    method = canonical_method(cfg.get("fit", "method", required=True))
    horizon = str(cfg.get("fit", "horizon", required=True))
    partition = canonical_partition(cfg.get("fit", "partition", "by_group"))
    cohort = _load_data(cfg)
    usable = cohort.usable(horizon)
    if usable.size < 2:
        raise ValidationError(f"fewer than 2 usable subjects at horizon {horizon}")
    y = cohort.targets[horizon][usable]
    tasks_all, task_names, scheme = _model_tasks(cohort, method, partition)
    tasks = tasks_all[usable]
    std = FeatureStandardizer().fit(cohort.features[usable])
    Xs = std.transform(cohort.features[usable])
    l1_ratio = cfg.get_float("fit", "l1_ratio", 0.5)
    if method in ("all_en", "sep_en"):
        alpha = cfg.get_float("fit", "alpha", required=True)
        S = len(task_names)
        W = np.zeros((cohort.n_features, S))
        biases = np.zeros(S)
        for d in range(S):
            rows = np.flatnonzero(tasks == d)
            if rows.size < 2:
                raise ValidationError(f"task {task_names[d]!r} has fewer than 2 rows")
            en = ElasticNetRegressor(alpha=alpha, l1_ratio=l1_ratio).fit(Xs[rows], y[rows])
            W[:, d] = en.coef_
            biases[d] = en.intercept_
        hyper = {"alpha": alpha, "l1_ratio": l1_ratio}
    else:
        rho1 = cfg.get_float("fit", "rho1", required=True)
        rho2 = cfg.get_float("fit", "rho2", 0.0)
        model = _FIT_CLASSES[method](rho1=rho1, rho2=rho2).fit(Xs, y, tasks)
        W = model.coef_
        biases = model.intercepts_
        hyper = {"rho1": rho1, "rho2": rho2}
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "method": method,
        "partition": scheme,
        "horizon": horizon,
        "hyperparameters": hyper,
        "standardizer": std.to_dict(),
        "weights": [W[:, d].tolist() for d in range(W.shape[1])],
        "biases": [float(b) for b in biases],
        "task_names": list(task_names),
        "feature_names": list(cohort.feature_names),
    }
    path = cfg.out_dir / "model.json"
    _write_json(path, doc, cfg)
    print(path)
    return 0


def cmd_predict(cfg):
    model_path = cfg.get("predict", "model", required=True)
    features_path = cfg.get("predict", "features") or cfg.get(
        "data", "features", required=True
    )
    targets_path = cfg.get("data", "targets")
    if not Path(features_path).exists():
        raise ConfigError(f"input file not found: {features_path}")
    try:
        doc = json.loads(Path(model_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {model_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse model JSON {model_path}: {exc}") from None
    if targets_path:
        cohort = load_cohort(features_path, targets_path)
    else:
        # predict does not need targets; synthesize an all-missing column
        import os
        import tempfile

        with tempfile.NamedTemporaryFile(
            "w", suffix=".csv", delete=False, encoding="utf-8"
        ) as tmp:
            tmp.write("subject_id,delta_0\n")
        try:
            cohort = load_cohort(features_path, tmp.name)
        finally:
            os.unlink(tmp.name)
    weights = np.asarray(doc["weights"], dtype=np.float64).T  # stored column-major
    biases = np.asarray(doc["biases"], dtype=np.float64)
    std = FeatureStandardizer.from_dict(doc["standardizer"])
    if cohort.n_features != weights.shape[0]:
        raise ConfigError(
            f"model expects {weights.shape[0]} features, data has {cohort.n_features}"
        )
    task_names = list(doc["task_names"])
    scheme = doc.get("partition", "pooled")
    if scheme == "pooled":
        tasks = np.zeros(cohort.n_subjects, dtype=np.int64)
    else:
        if scheme == "by_group":
            keys = [g for g in cohort.group]
        else:
            keys = ["/".join(k) for k in zip(cohort.group, cohort.batch)]
        index = {name: i for i, name in enumerate(task_names)}
        missing = sorted(set(k for k in keys if k not in index))
        if missing:
            raise ConfigError(f"no model task for cell(s) {missing}")
        tasks = np.asarray([index[k] for k in keys], dtype=np.int64)
    Xs = std.transform(cohort.features)
    preds = np.einsum("ij,ji->i", Xs, weights[:, tasks]) + biases[tasks]
    path = cfg.out_dir / "predictions.csv"
    _write_csv(
        path,
        ["subject_id", "prediction"],
        [[sid, _fmt(float(p))] for sid, p in zip(cohort.subject_ids, preds)],
        cfg,
    )
    print(path)
    return 0


def cmd_evaluate(cfg):
    sec = "evaluate"
    method = canonical_method(cfg.get(sec, "method", required=True))
    harmonization = canonical_harmonization(cfg.get(sec, "harmonization", "none"))
    partition = canonical_partition(cfg.get(sec, "partition", "by_group"))
    cohort = _load_data(cfg)
    horizons = cfg.get_list(sec, "horizons") or list(cohort.horizons)
    repeats = cfg.get_int(sec, "repeats", 10)
    outer = cfg.get_int(sec, "outer_folds", 10)
    inner = cfg.get_int(sec, "inner_folds", outer)
    scope = cfg.get(sec, "harmonization_scope", "per_fold")
    n_boot = cfg.get_int(sec, "bootstrap", 1000)
    grid = _grid_from_config(cfg)
    blocks = _load_blocks(cfg, cohort)
    reports = []
    for horizon in horizons:
        reports.append(
            nested_cv(
                cohort, method, str(horizon),
                partition=partition, harmonization=harmonization, grid=grid,
                repeats=repeats, outer_folds=outer, inner_folds=inner,
                seed=cfg.seed, jobs=cfg.jobs, blocks=blocks,
                harmonization_scope=scope, n_boot=n_boot,
            )
        )
    out = cfg.out_dir
    json_path = out / "report.json"
    doc = {"reports": [r.to_dict() for r in reports]}
    _write_json(json_path, doc, cfg)
    csv_path = out / "report.csv"
    rows = []
    for r in reports:
        for row in r.csv_rows():
            rows.append([row[c] for c in REPORT_CSV_COLUMNS])
    _write_csv(csv_path, REPORT_CSV_COLUMNS, rows, cfg)
    print(json_path)
    print(csv_path)
    return 0


def cmd_report(cfg):
    paths = cfg.get_list("report", "reports")
    if not paths:
        raise ConfigError("config is missing [report] reports (comma list of JSONs)")
    rows = []
    for p in paths:
        try:
            doc = json.loads(Path(p).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"report file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse report JSON {p}: {exc}") from None
        for rep in doc.get("reports", [doc] if "groups" in doc else []):
            for g, gr in rep["groups"].items():
                rows.append([
                    rep["method"], rep["horizon"], rep["partition"],
                    rep["harmonization"], g, gr["n"], int(gr["low_n"]),
                    gr["r_mean"],
                    None if gr["r_ci"] is None else gr["r_ci"][0],
                    None if gr["r_ci"] is None else gr["r_ci"][1],
                    gr["mae_mean"],
                    None if gr["mae_ci"] is None else gr["mae_ci"][0],
                    None if gr["mae_ci"] is None else gr["mae_ci"][1],
                ])
    path = cfg.out_dir / "report_flat.csv"
    _write_csv(path, REPORT_CSV_COLUMNS, rows, cfg)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "harmonize": cmd_harmonize,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mtlharm",
        description="Penalized single/multitask regression with batch harmonization",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig(args.config, args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
