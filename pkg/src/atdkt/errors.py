"""Exception types shared across the package.

Each maps to a CLI exit code so scripted callers can distinguish bad
input (2), a failed training run (3), and a missing or unusable model
artifact (4).
"""


class AtdktError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DataError(AtdktError):
    """Malformed or inconsistent input data (schema, ids, ordering)."""

    exit_code = 2


class ConfigError(AtdktError):
    """Invalid configuration value or combination."""

    exit_code = 2


class ShapeError(AtdktError):
    """Tensor operands with incompatible shapes."""

    exit_code = 1


class TrainingError(AtdktError):
    """Optimization aborted (non-finite loss or gradient)."""

    exit_code = 3


class EvaluationError(AtdktError):
    """Evaluation could not run (missing checkpoint, bad artifact)."""

    exit_code = 4


class MetricError(AtdktError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""

    exit_code = 1


class NotFittedError(AtdktError):
    """Estimator method called before fit()."""

    exit_code = 1
