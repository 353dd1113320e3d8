"""Exception hierarchy. Each family maps to a CLI exit code."""


class FairDiffError(Exception):
    exit_code = 1


class UsageError(FairDiffError, ValueError):
    """Bad arguments, shapes or configuration."""

    exit_code = 2


class ConfigError(UsageError):
    pass


class DataError(FairDiffError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class LoadError(DataError):
    pass


class FitError(DataError):
    pass


class EvaluationError(DataError):
    pass


class MetricError(EvaluationError):
    pass


class NumericError(FairDiffError, ArithmeticError):
    exit_code = 4
