"""Exception types shared across the toolkit."""


class TristreamError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TristreamError, ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(TristreamError, ValueError):
    """Invalid model/training/preprocessing configuration."""


class DataError(TristreamError, ValueError):
    """Malformed dataset, checkpoint file, or data/model mismatch."""


class GradientError(TristreamError, RuntimeError):
    """Backpropagation hit a non-finite gradient or an invalid graph."""


class NumericError(TristreamError, RuntimeError):
    """A forward pass or training step produced non-finite values."""
