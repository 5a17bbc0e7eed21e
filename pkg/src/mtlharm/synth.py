"""Synthetic cohort generation with planted structure, plus grid-search oracles.

Cohorts follow the same generative form the solvers and harmonizers assume:
clean features (optionally AR(1)-correlated across columns) carry the target
signal through a per-group coefficient matrix with shared and task-specific
support; the observed features add a per-batch location shift, a per-batch
scale on the clean part, and a linear age effect.  Ground truth is returned
for recovery tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort
from .exceptions import ValidationError
from .pls import RegionBlocks
from .validation import seeded_rng

__all__ = ["SynthSpec", "generate", "brute_force_penalized_ls"]


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the generator; every draw is fixed by `seed`."""

    groups: tuple = ("NC", "MCI", "AD")
    batches: tuple = ("1.5T", "3.0T")
    n_per_cell: int = 67  # desk-scale default: 3 x 2 x 67 = 402 subjects
    m_features: int = 122
    block_size: int = 6
    shared_support: int = 5
    task_support: int = 2
    coef_scale: float = 1.0
    noise_sd: float = 1.0
    batch_shift: tuple = (0.0, 0.0)
    batch_scale: tuple = (1.0, 1.0)
    batch_shift_jitter: float = 0.0
    age_slope: float = 0.0
    age_range: tuple = (55.0, 90.0)
    ar1_corr: float = 0.3
    horizons: tuple = ("12", "24", "36")
    horizon_scale: tuple = (1.0, 1.5, 2.0)
    missing_rate: tuple = (0.0, 0.0, 0.0)
    group_feature_shift: tuple = ()
    group_target_offset: tuple = ()
    paired_batches: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_per_cell < 1 or self.m_features < 1:
            raise ValidationError("n_per_cell and m_features must be >= 1")
        if len(self.batch_shift) != len(self.batches):
            raise ValidationError("batch_shift needs one value per batch")
        if len(self.batch_scale) != len(self.batches):
            raise ValidationError("batch_scale needs one value per batch")
        if any(d <= 0 for d in self.batch_scale):
            raise ValidationError("batch_scale values must be positive")
        if len(self.horizons) != len(self.missing_rate):
            raise ValidationError("missing_rate needs one value per horizon")
        if len(self.horizons) != len(self.horizon_scale):
            raise ValidationError("horizon_scale needs one value per horizon")
        if not (0.0 <= self.ar1_corr < 1.0):
            raise ValidationError("ar1_corr must be in [0, 1)")
        if self.paired_batches and len(self.batches) != 2:
            raise ValidationError("paired_batches requires exactly 2 batches")


def generate(spec: SynthSpec):
    """Draw a cohort per the spec; returns (Cohort, ground_truth dict).

    With paired_batches=True the second batch reuses the first batch's clean
    features, ages and target noise, so batch differences are exactly the
    planted location/scale effects (a balanced two-sample design).
    """
    rng = seeded_rng(spec.seed, 9001)
    G, B = len(spec.groups), len(spec.batches)
    M = spec.m_features
    n_cell = spec.n_per_cell

    g_feat_shift = list(spec.group_feature_shift) or [0.0] * G
    g_targ_offset = list(spec.group_target_offset) or [0.0] * G
    if len(g_feat_shift) != G or len(g_targ_offset) != G:
        raise ValidationError("group shift/offset need one value per group")

    # planted coefficients: shared support plus per-task extras
    if spec.shared_support + G * spec.task_support > M:
        raise ValidationError(
            f"supports need {spec.shared_support + G * spec.task_support} features "
            f"(shared {spec.shared_support} + {G} groups x {spec.task_support}), "
            f"have {M}"
        )
    W_true = np.zeros((M, G))
    perm = rng.permutation(M)
    shared = perm[: spec.shared_support]
    extras_pool = perm[spec.shared_support:]
    signs = rng.choice([-1.0, 1.0], size=spec.shared_support)
    for g in range(G):
        W_true[shared, g] = spec.coef_scale * signs
        if spec.task_support:
            own = extras_pool[g * spec.task_support: (g + 1) * spec.task_support]
            W_true[own, g] = spec.coef_scale * rng.choice([-1.0, 1.0], size=own.size)

    gamma = np.zeros((B, M))
    for b in range(B):
        gamma[b] = spec.batch_shift[b]
        if spec.batch_shift_jitter:
            gamma[b] += spec.batch_shift_jitter * rng.standard_normal(M)
    delta = np.asarray(spec.batch_scale, dtype=np.float64)

    def draw_clean(n):
        Z = rng.standard_normal((n, M))
        if spec.ar1_corr:
            rho = spec.ar1_corr
            X = np.empty_like(Z)
            X[:, 0] = Z[:, 0]
            for j in range(1, M):
                X[:, j] = rho * X[:, j - 1] + np.sqrt(1.0 - rho * rho) * Z[:, j]
            return X
        return Z

    ids, groups_out, batches_out, ages = [], [], [], []
    clean_rows, obs_rows = [], []
    noise_cols = {h: [] for h in spec.horizons}
    age_lo, age_hi = spec.age_range
    for g, gname in enumerate(spec.groups):
        cell_clean = cell_age = cell_noise = None
        for b, bname in enumerate(spec.batches):
            if spec.paired_batches and b == 1:
                clean, age, tnoise = cell_clean, cell_age, cell_noise
            else:
                clean = draw_clean(n_cell) + g_feat_shift[g]
                age = rng.uniform(age_lo, age_hi, size=n_cell)
                tnoise = {
                    h: rng.standard_normal(n_cell) * spec.noise_sd
                    for h in spec.horizons
                }
                cell_clean, cell_age, cell_noise = clean, age, tnoise
            obs = delta[b] * (clean - g_feat_shift[g]) + g_feat_shift[g] + gamma[b]
            if spec.age_slope:
                obs = obs + spec.age_slope * (age - 0.5 * (age_lo + age_hi))[:, None]
            for i in range(n_cell):
                ids.append(f"s{len(ids):05d}")
            groups_out.extend([gname] * n_cell)
            batches_out.extend([bname] * n_cell)
            ages.append(age)
            clean_rows.append(clean)
            obs_rows.append(obs)
            for h in spec.horizons:
                noise_cols[h].append(tnoise[h])

    clean_all = np.vstack(clean_rows)
    obs_all = np.vstack(obs_rows)
    age_all = np.concatenate(ages)
    group_idx = np.asarray(
        [spec.groups.index(g) for g in groups_out], dtype=np.int64
    )
    targets = {}
    base_signal = np.einsum(
        "ij,ji->i", clean_all, W_true[:, group_idx]
    ) + np.asarray(g_targ_offset)[group_idx]
    for k, h in enumerate(spec.horizons):
        y = spec.horizon_scale[k] * base_signal + np.concatenate(noise_cols[h])
        rate = spec.missing_rate[k]
        if rate > 0.0:
            mask = seeded_rng(spec.seed, 9002, k).random(y.shape[0]) < rate
            y = y.copy()
            y[mask] = np.nan
        targets[h] = y

    n_blocks = max(1, int(np.ceil(M / spec.block_size)))
    block_of = np.minimum(np.arange(M) // spec.block_size, n_blocks - 1)
    blocks = RegionBlocks(
        block_of, tuple(f"block_{i:03d}" for i in range(n_blocks))
    )

    cohort = Cohort(
        subject_ids=tuple(ids),
        features=obs_all,
        feature_names=tuple(f"f_{j + 1:03d}" for j in range(M)),
        group=np.asarray(groups_out, dtype=object),
        batch=np.asarray(batches_out, dtype=object),
        age=age_all,
        targets=targets,
    )
    truth = {
        "W_true": W_true,
        "gamma": gamma,
        "delta": delta,
        "age_slope": spec.age_slope,
        "clean_features": clean_all,
        "blocks": blocks,
        "shared_support": np.sort(shared),
        "group_target_offset": np.asarray(g_targ_offset),
    }
    return cohort, truth


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------

MAX_GRID_POINTS = 10_000_000


def _dirty_split_penalty(Wf, rho1, rho2):
    """min over W = S + R of rho1*||R||_{1,inf} + rho2*||S||_1, rows independent.

    For one row w, parametrize by the row max m of |r|: the optimal r clamps w
    to [-m, m] and the cost rho1*m + rho2*sum(max(|w|-m, 0)) is piecewise
    linear in m, so the minimum sits at a breakpoint m in {0} u {|w_d|}.
    Wf has shape (npts, M, S); returns (npts,) penalties.
    """
    npts, M, S = Wf.shape
    absw = np.abs(Wf)
    breaks = np.concatenate([np.zeros((npts, M, 1)), absw], axis=2)  # candidates
    # cost at each candidate m: rho1*m + rho2 * sum_d max(|w_d| - m, 0)
    excess = np.maximum(absw[:, :, None, :] - breaks[:, :, :, None], 0.0).sum(axis=3)
    cost = rho1 * breaks + rho2 * excess
    return cost.min(axis=2).sum(axis=1)


def _penalty_values(Wf, penalty):
    kind = penalty["kind"]
    if kind == "en":
        lam, l1r = penalty["alpha"], penalty["l1_ratio"]
        flat = Wf.reshape(Wf.shape[0], -1)
        return lam * (
            (1.0 - l1r) * 0.5 * (flat * flat).sum(axis=1)
            + l1r * np.abs(flat).sum(axis=1)
        )
    if kind == "l1":
        base = penalty["rho1"] * np.abs(Wf).sum(axis=(1, 2))
    elif kind == "l21":
        base = penalty["rho1"] * np.sqrt((Wf * Wf).sum(axis=2)).sum(axis=1)
    elif kind == "nuclear":
        base = penalty["rho1"] * np.linalg.svd(Wf, compute_uv=False).sum(axis=1)
    elif kind == "dirty":
        return _dirty_split_penalty(Wf, penalty["rho1"], penalty["rho2"])
    else:
        raise ValidationError(f"unknown penalty kind {kind!r}")
    rho2 = penalty.get("rho2", 0.0)
    if rho2 and kind in ("l1", "l21"):
        base = base + rho2 * (Wf * Wf).sum(axis=(1, 2))
    return base


def brute_force_penalized_ls(Xs, ys, penalty, box=(-3.0, 3.0), resolution=0.05):
    """Exhaustive grid minimizer of the penalized multitask least squares.

    Xs, ys are per-task lists; the grid covers every coefficient of the M x S
    matrix over `box` at `resolution`.  Intercepts are partially minimized by
    centering.  Total grid points must stay within 1e7.  The dirty penalty is
    handled by an exact inner minimization over the S + R split for each grid
    W.  Returns (W_best, objective_best).
    """
    Xs = [np.asarray(X, dtype=np.float64) for X in Xs]
    ys = [np.asarray(y, dtype=np.float64).ravel() for y in ys]
    S = len(Xs)
    M = Xs[0].shape[1]
    axis = np.arange(box[0], box[1] + resolution / 2.0, resolution)
    npts = len(axis) ** (M * S)
    if npts > MAX_GRID_POINTS:
        raise ValidationError(
            f"grid of {npts} points exceeds the {MAX_GRID_POINTS} budget"
        )
    Xc = [X - X.mean(axis=0) for X in Xs]
    yc = [y - y.mean() for y in ys]
    grids = np.meshgrid(*([axis] * (M * S)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)  # (npts, M*S)
    Wf = pts.reshape(-1, S, M).transpose(0, 2, 1)  # column-major per task
    best_obj = np.inf
    best_W = None
    chunk = max(1, int(2_000_000 // max(1, sum(x.shape[0] for x in Xc))))
    for start in range(0, Wf.shape[0], chunk):
        Wc = Wf[start:start + chunk]
        loss = np.zeros(Wc.shape[0])
        for d in range(S):
            r = Wc[:, :, d] @ Xc[d].T - yc[d]
            loss += (r * r).sum(axis=1) / (2.0 * Xc[d].shape[0])
        obj = loss + _penalty_values(Wc, penalty)
        i = int(np.argmin(obj))
        if obj[i] < best_obj:
            best_obj = float(obj[i])
            best_W = Wc[i].copy()
    return best_W, best_obj
