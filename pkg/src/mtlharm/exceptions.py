"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto exit codes: ConfigError -> 2, LoadError and
ValidationError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Bad usage or configuration (unknown method name, missing key, ...)."""


class ValidationError(ValueError):
    """Data that violates a documented precondition or invariant."""


class LoadError(ValidationError):
    """File-level problem; message names the file and, where known, line/column."""


class UndefinedMetricError(ValidationError):
    """Metric has no defined value (constant input, too few points).

    Callers report the metric as missing rather than substituting 0.
    """


class NumericalError(RuntimeError):
    """Solver divergence, SVD failure, or other numerical breakdown."""
