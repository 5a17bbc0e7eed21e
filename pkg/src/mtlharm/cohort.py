"""Cohort data model: subjects x features with group/batch labels and targets.

A Cohort is immutable once built; its arrays are marked read-only so it can be
shared freely across parallel workers.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import LoadError, ValidationError
from .validation import check_matrix

FEATURE_META_COLUMNS = ("subject_id", "group", "batch", "age")

SCHEME_BY_GROUP = "by_group"
SCHEME_BY_GROUP_AND_BATCH = "by_group_and_batch"
SCHEME_POOLED = "pooled"
PARTITION_SCHEMES = (SCHEME_BY_GROUP, SCHEME_BY_GROUP_AND_BATCH, SCHEME_POOLED)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Cohort:
    """Validated table of subjects: features, labels, age and per-horizon targets.

    targets maps a horizon label to a length-N float vector with NaN marking
    missing follow-ups.
    """

    subject_ids: tuple
    features: np.ndarray
    feature_names: tuple
    group: np.ndarray
    batch: np.ndarray
    age: np.ndarray
    targets: dict = field(default_factory=dict)

    def __post_init__(self):
        X = check_matrix(self.features, "features")
        n, m = X.shape
        if n < 1 or m < 1:
            raise ValidationError("cohort needs at least one subject and one feature")
        ids = tuple(str(s) for s in self.subject_ids)
        if len(ids) != n:
            raise ValidationError("subject_ids length does not match feature rows")
        if len(set(ids)) != n:
            seen, dup = set(), None
            for s in ids:
                if s in seen:
                    dup = s
                    break
                seen.add(s)
            raise ValidationError(f"duplicate subject_id {dup!r}")
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != m:
            raise ValidationError("feature_names length does not match feature columns")
        group = np.asarray([str(g) for g in self.group], dtype=object)
        batch = np.asarray([str(b) for b in self.batch], dtype=object)
        if group.shape != (n,) or batch.shape != (n,):
            raise ValidationError("group and batch must have one label per subject")
        age = np.asarray(self.age, dtype=np.float64).ravel()
        if age.shape != (n,) or not np.all(np.isfinite(age)):
            raise ValidationError("age must be a finite vector with one entry per subject")
        targets = {}
        for label, vec in self.targets.items():
            v = np.asarray(vec, dtype=np.float64).ravel()
            if v.shape != (n,):
                raise ValidationError(f"target {label!r} must have length {n}")
            targets[str(label)] = _freeze(v)
        object.__setattr__(self, "subject_ids", ids)
        object.__setattr__(self, "features", _freeze(X))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "group", _freeze(group))
        object.__setattr__(self, "batch", _freeze(batch))
        object.__setattr__(self, "age", _freeze(age))
        object.__setattr__(self, "targets", targets)

    @property
    def n_subjects(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def horizons(self) -> tuple:
        return tuple(self.targets.keys())

    def group_levels(self) -> list:
        return sorted(set(self.group))

    def batch_levels(self) -> list:
        return sorted(set(self.batch))

    def usable(self, horizon) -> np.ndarray:
        """Indices of subjects with a non-missing target at the horizon."""
        horizon = str(horizon)
        if horizon not in self.targets:
            raise ValidationError(
                f"unknown horizon {horizon!r}; have {list(self.targets)}"
            )
        return np.flatnonzero(np.isfinite(self.targets[horizon]))


@dataclass(frozen=True)
class TaskPartition:
    """Assignment of every subject to one of S tasks, ordered lexicographically.

    Index -1 marks a subject outside every training cell (possible when the
    partition is restricted to a training split).
    """

    task_of: np.ndarray
    task_names: tuple
    scheme: str

    def __post_init__(self):
        task_of = np.asarray(self.task_of, dtype=np.int64)
        names = tuple(str(t) for t in self.task_names)
        if self.scheme not in PARTITION_SCHEMES:
            raise ValidationError(f"unknown partition scheme {self.scheme!r}")
        if task_of.ndim != 1:
            raise ValidationError("task_of must be a vector")
        if task_of.size and (task_of.min() < -1 or task_of.max() >= len(names)):
            raise ValidationError("task index out of range")
        object.__setattr__(self, "task_of", _freeze(task_of))
        object.__setattr__(self, "task_names", names)

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)


def partition_tasks(cohort: Cohort, scheme: str, rows=None) -> TaskPartition:
    """Partition subjects into prediction tasks.

    scheme "by_group" gives one task per diagnostic group, "by_group_and_batch"
    one per non-empty (group, batch) cell, "pooled" a single task.  Task order
    is lexicographic by (group, batch) names.  When restricted to `rows`
    (e.g. a training split), empty by-group-and-batch cells are dropped with a
    warning and the remaining tasks re-indexed; subjects outside any kept cell
    get task -1.
    """
    if scheme not in PARTITION_SCHEMES:
        raise ValidationError(f"unknown partition scheme {scheme!r}")
    n = cohort.n_subjects
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    if scheme == SCHEME_POOLED:
        return TaskPartition(np.zeros(n, dtype=np.int64), ("all",), scheme)
    if scheme == SCHEME_BY_GROUP:
        keys = [(g,) for g in cohort.group]
    else:
        keys = list(zip(cohort.group, cohort.batch))
    present = sorted(set(keys[i] for i in rows))
    if scheme == SCHEME_BY_GROUP_AND_BATCH:
        full = sorted(
            {(g, b) for g in set(cohort.group) for b in set(cohort.batch)}
        )
        dropped = [cell for cell in full if cell not in present]
        if dropped:
            warnings.warn(
                f"empty (group, batch) cells dropped from partition: {dropped}",
                stacklevel=2,
            )
    index = {key: i for i, key in enumerate(present)}
    task_of = np.asarray([index.get(k, -1) for k in keys], dtype=np.int64)
    names = tuple("/".join(key) for key in present)
    return TaskPartition(task_of, names, scheme)


class FeatureStandardizer(BaseEstimator, TransformerMixin):
    """Column-wise z-scoring with sample standard deviation (ddof=1).

    Zero-variance columns get their scale clamped to 1 so they are centered
    only.  Fit on training rows; transform/inverse_transform apply anywhere.
    """

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        if X.shape[0] < 2:
            raise ValidationError("standardizer needs at least 2 rows to fit")
        self.means_ = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        self.scales_ = np.where(sd > 0.0, sd, 1.0)
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        self._check_width(X)
        return (X - self.means_) / self.scales_

    def inverse_transform(self, X):
        X = check_matrix(X, "X")
        self._check_width(X)
        return X * self.scales_ + self.means_

    def _check_width(self, X):
        if X.shape[1] != self.means_.shape[0]:
            raise ValidationError(
                f"expected {self.means_.shape[0]} columns, got {X.shape[1]}"
            )

    def to_dict(self) -> dict:
        return {"means": self.means_.tolist(), "scales": self.scales_.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FeatureStandardizer":
        obj = cls()
        obj.means_ = np.asarray(d["means"], dtype=np.float64)
        obj.scales_ = np.asarray(d["scales"], dtype=np.float64)
        return obj


def _open_rows(path):
    """Yield (line_number, row) from a CSV file, skipping '#' comment lines."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row and row[0].lstrip().startswith("#"):
                continue
            if not row:
                continue
            yield lineno, row


def _parse_float(text, path, lineno, column, *, allow_missing=False):
    text = text.strip()
    if text == "":
        if allow_missing:
            return np.nan
        raise LoadError(f"{path}:{lineno}: column {column!r} is empty")
    try:
        value = float(text)
    except ValueError:
        raise LoadError(
            f"{path}:{lineno}: column {column!r} has non-numeric value {text!r}"
        ) from None
    if not np.isfinite(value):
        if allow_missing and np.isnan(value):
            return np.nan
        raise LoadError(
            f"{path}:{lineno}: column {column!r} has non-finite value {text!r}"
        )
    return value


def load_cohort(features_path, targets_path) -> Cohort:
    """Load and join the features and targets CSV files into a Cohort.

    Features schema: subject_id,group,batch,age,<feature columns...>.
    Targets schema: subject_id,<horizon columns...>, empty cell = missing.
    Rows are joined on subject_id; subjects absent from the targets file keep
    all-missing targets.
    """
    rows = iter(_open_rows(features_path))
    try:
        _, header = next(rows)
    except StopIteration:
        raise LoadError(f"{features_path}: file is empty") from None
    header = [h.strip() for h in header]
    if tuple(header[:4]) != FEATURE_META_COLUMNS:
        raise LoadError(
            f"{features_path}:1: header must start with "
            f"{','.join(FEATURE_META_COLUMNS)}, got {','.join(header[:4])}"
        )
    feature_names = header[4:]
    if not feature_names:
        raise LoadError(f"{features_path}:1: no feature columns found")
    ids, groups, batches, ages, feats = [], [], [], [], []
    seen = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise LoadError(
                f"{features_path}:{lineno}: expected {len(header)} fields, got {len(row)}"
            )
        sid = row[0].strip()
        if not sid:
            raise LoadError(f"{features_path}:{lineno}: empty subject_id")
        if sid in seen:
            raise LoadError(
                f"{features_path}:{lineno}: duplicate subject_id {sid!r} "
                f"(first seen on line {seen[sid]})"
            )
        seen[sid] = lineno
        group, batch = row[1].strip(), row[2].strip()
        if not group or not batch:
            raise LoadError(f"{features_path}:{lineno}: empty group or batch label")
        age = _parse_float(row[3], features_path, lineno, "age")
        values = [
            _parse_float(cell, features_path, lineno, feature_names[j])
            for j, cell in enumerate(row[4:])
        ]
        ids.append(sid)
        groups.append(group)
        batches.append(batch)
        ages.append(age)
        feats.append(values)
    if not ids:
        raise LoadError(f"{features_path}: no data rows")

    rows = iter(_open_rows(targets_path))
    try:
        _, theader = next(rows)
    except StopIteration:
        raise LoadError(f"{targets_path}: file is empty") from None
    theader = [h.strip() for h in theader]
    if not theader or theader[0] != "subject_id":
        raise LoadError(f"{targets_path}:1: first column must be subject_id")
    horizon_cols = theader[1:]
    if not horizon_cols:
        raise LoadError(f"{targets_path}:1: no target columns found")
    labels = [c[len("delta_"):] if c.startswith("delta_") else c for c in horizon_cols]
    id_index = {sid: i for i, sid in enumerate(ids)}
    targets = {lab: np.full(len(ids), np.nan) for lab in labels}
    seen_t = {}
    for lineno, row in rows:
        if len(row) != len(theader):
            raise LoadError(
                f"{targets_path}:{lineno}: expected {len(theader)} fields, got {len(row)}"
            )
        sid = row[0].strip()
        if sid in seen_t:
            raise LoadError(
                f"{targets_path}:{lineno}: duplicate subject_id {sid!r} "
                f"(first seen on line {seen_t[sid]})"
            )
        seen_t[sid] = lineno
        if sid not in id_index:
            raise LoadError(
                f"{targets_path}:{lineno}: subject_id {sid!r} not present in "
                f"{features_path}"
            )
        i = id_index[sid]
        for lab, cell in zip(labels, row[1:]):
            targets[lab][i] = _parse_float(
                cell, targets_path, lineno, f"delta_{lab}", allow_missing=True
            )
    return Cohort(
        subject_ids=tuple(ids),
        features=np.asarray(feats, dtype=np.float64),
        feature_names=tuple(feature_names),
        group=np.asarray(groups, dtype=object),
        batch=np.asarray(batches, dtype=object),
        age=np.asarray(ages, dtype=np.float64),
        targets=targets,
    )
