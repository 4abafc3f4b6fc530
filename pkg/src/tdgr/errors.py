"""Exception types shared across the package."""


class TdgrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TdgrError):
    """Invalid static configuration: shapes, hyperparameters, config files."""


class InputError(TdgrError):
    """Invalid runtime input, e.g. non-finite values or out-of-range steps."""


class TrainingError(TdgrError):
    """Training diverged or produced unusable gradients."""


class GenerationError(TdgrError):
    """A generative process produced invalid output or could not finish."""


class BenchmarkError(TdgrError):
    """A benchmark task violates its own contract (e.g. the expert fails)."""


class CapacityError(TdgrError):
    """A fixed-capacity method ran out of free parameters."""


class CheckpointError(TdgrError):
    """Malformed or mismatched checkpoint/dataset file."""
