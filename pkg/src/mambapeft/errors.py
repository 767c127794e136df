"""Exception hierarchy shared across the package."""


class MambaPeftError(Exception):
    """Base class for all package errors."""


class ShapeError(MambaPeftError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericalError(MambaPeftError, FloatingPointError):
    """A forward value or loss became NaN/Inf."""


class TrainingDiverged(NumericalError):
    """Training produced a non-finite loss and was aborted."""


class ConfigError(MambaPeftError, ValueError):
    """Invalid model, adapter, task or experiment configuration."""


class CheckpointError(MambaPeftError, ValueError):
    """A checkpoint file is malformed or inconsistent."""


class TrialLogError(MambaPeftError, ValueError):
    """A trial log line could not be parsed."""


class ResumeConflict(MambaPeftError):
    """An existing trial log was written for a different search configuration."""
