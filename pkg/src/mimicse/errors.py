"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and validation problems
exit 2, data problems exit 3, numerical failures exit 4.
"""


class MimicError(Exception):
    """Base class for all package errors."""


class ConfigError(MimicError, ValueError):
    """An invalid configuration (bad STFT parameters, illegal mode/loss pair, ...)."""


class ValidationError(MimicError, ValueError):
    """An input violates an operation's preconditions."""


class LengthError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DataError(MimicError):
    """Corpus, manifest or alignment problems (missing files, label mismatches)."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = list(offending or [])


class CheckpointError(DataError):
    pass


class NumericalError(MimicError):
    """A non-finite loss or gradient was produced."""


class FrozenModelError(MimicError, RuntimeError):
    """Raised when something tries to update a frozen model."""
