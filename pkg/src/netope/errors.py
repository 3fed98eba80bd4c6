"""Exception types raised across the package."""


class NetopeError(Exception):
    """Base class for all package errors."""


class ParameterError(NetopeError, ValueError):
    """An argument is outside its documented domain."""


class FormatError(NetopeError, ValueError):
    """An input file does not follow the expected format."""


class SupportError(NetopeError, ValueError):
    """Behavior propensity too small for an importance weight (positivity violated)."""


class TrainingError(NetopeError, RuntimeError):
    """Classifier training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class StateError(NetopeError, RuntimeError):
    """Operation requires an object in a different state (e.g. an untrained model)."""


class ConfigError(NetopeError, ValueError):
    """Invalid experiment or model configuration."""


class NumericError(NetopeError, ArithmeticError):
    """Iterative numeric routine failed or produced non-finite values."""
