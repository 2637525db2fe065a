"""Exception hierarchy shared across the package."""


class FssfError(Exception):
    """Base class for all errors raised by fssfnet."""


class ConfigurationError(FssfError, ValueError):
    """Invalid hyperparameters or layer settings."""


class DimensionError(FssfError, ValueError):
    """Array shapes that do not fit together."""


class PairingError(DimensionError):
    """Two artifacts (cube, labels, checkpoint) that do not belong together."""


class StateError(FssfError, RuntimeError):
    """An operation called in the wrong order, e.g. backward before forward."""


class FormatError(FssfError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FssfError, ArithmeticError):
    """NaN or Inf appeared in a loss or gradient."""
