"""Penalized single/multitask regression with batch-effect harmonization.

Data model (Cohort), proximal operators, elastic-net and FISTA solvers,
ComBat and PLS harmonization, a repeated nested cross-validation harness with
bootstrap intervals, and a synthetic-cohort generator for testing.
"""

from .cohort import (
    Cohort,
    FeatureStandardizer,
    TaskPartition,
    load_cohort,
    partition_tasks,
)
from .evaluation import (
    EvalReport,
    SearchGrid,
    bootstrap_ci,
    mae,
    nested_cv,
    pearson_r,
    stratified_folds,
)
from .exceptions import (
    ConfigError,
    LoadError,
    NumericalError,
    UndefinedMetricError,
    ValidationError,
)
from .harmonize import CombatHarmonizer, CovariateResidualizer, batch_t_diagnostic
from .pls import (
    PlsDomainAdapter,
    PlsRegression,
    RegionBlocks,
    StackedBlockRegressor,
    adapt_blocks,
    load_block_map,
    single_block,
)
from .prox import (
    project_l1_ball,
    prox_group_l21,
    prox_linf_rows,
    prox_nuclear,
    soft_threshold,
    thin_svd,
)
from .solvers import (
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
from .synth import SynthSpec, brute_force_penalized_ls, generate

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "TaskPartition",
    "FeatureStandardizer",
    "load_cohort",
    "partition_tasks",
    "soft_threshold",
    "prox_group_l21",
    "project_l1_ball",
    "prox_linf_rows",
    "prox_nuclear",
    "thin_svd",
    "ElasticNetRegressor",
    "MultiTaskLasso",
    "JointFeatureSelection",
    "DirtyModel",
    "TraceNormRegressor",
    "default_alpha_grid",
    "elastic_net_path",
    "multitask_loss_grad",
    "stack_tasks",
    "CombatHarmonizer",
    "CovariateResidualizer",
    "batch_t_diagnostic",
    "PlsRegression",
    "PlsDomainAdapter",
    "RegionBlocks",
    "StackedBlockRegressor",
    "adapt_blocks",
    "load_block_map",
    "single_block",
    "pearson_r",
    "mae",
    "stratified_folds",
    "bootstrap_ci",
    "nested_cv",
    "EvalReport",
    "SearchGrid",
    "SynthSpec",
    "generate",
    "brute_force_penalized_ls",
    "ConfigError",
    "ValidationError",
    "LoadError",
    "UndefinedMetricError",
    "NumericalError",
]
