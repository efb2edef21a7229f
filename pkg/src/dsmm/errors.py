"""Shared exception types."""


class ShapeError(ValueError):
    """A tensor dimension does not match what an operation requires.

    The message always names the offending axis.
    """

    def __init__(self, axis, message):
        self.axis = axis
        super().__init__(f"{axis} axis mismatch: {message}")


class ValidationError(ValueError):
    """An argument is outside its documented range."""


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, version, or truncation)."""


class ConfigError(ValueError):
    """A configuration file or value is invalid; names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"invalid config field '{field}': {message}")


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite (learning-rate divergence signal)."""


class DegenerateOperator(RuntimeError):
    """The sampling operator has (numerically) zero spectral norm."""


class MatrixMismatch(ValueError):
    """A learned reconstructor was paired with a matrix it was not trained on."""
