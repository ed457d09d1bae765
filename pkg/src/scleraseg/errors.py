"""Exception hierarchy, grouped by the CLI exit code each family maps to."""


class ScleraError(Exception):
    """Base class for every error raised on purpose by this package."""


class UsageError(ScleraError):
    """Bad invocation or configuration (exit code 1)."""


class DataError(ScleraError):
    """Unusable input data or files (exit code 2)."""


class NumericalError(ScleraError, RuntimeError):
    """Training produced a non-finite value (exit code 3)."""


class ConfigError(UsageError, ValueError):
    pass


class DatasetError(DataError):
    """Raised for unrecoverable ingestion or preprocessing problems."""


class EvaluationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ModelSpecError(DataError, ValueError):
    pass


class InputShapeError(DataError, ValueError):
    pass
