"""Exception types shared across the package."""


class RvqDiffError(Exception):
    """Base class for all package errors."""


class DomainError(RvqDiffError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(RvqDiffError, ValueError):
    """Array shapes do not match the contract of the operation."""


class CapacityError(RvqDiffError):
    """A state space is too large to enumerate."""


class NumericError(RvqDiffError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""

    def __init__(self, message, name=None, last_checkpoint=None):
        super().__init__(message)
        self.name = name
        self.last_checkpoint = last_checkpoint


class ConfigError(RvqDiffError, ValueError):
    """Invalid configuration value or key."""


class IntegrityError(RvqDiffError):
    """A checkpoint or data file failed its integrity check."""
