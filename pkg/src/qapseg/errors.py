"""Exception hierarchy shared by every qapseg module."""


class QapsegError(Exception):
    """Base class for all qapseg errors."""


class DimensionError(QapsegError, ValueError):
    """Tensor or array extents do not line up."""


class ConfigurationError(QapsegError, ValueError):
    """A parameter combination cannot be honoured."""


class DataError(QapsegError, ValueError):
    """Label or sample content is out of range."""


class FormatError(QapsegError, ValueError):
    """A file could not be parsed; the message names the byte offset."""


class UsageError(QapsegError, RuntimeError):
    """An API was called in a state it does not support."""


class TrainingError(QapsegError, RuntimeError):
    """Optimisation produced non-finite values."""
