"""Exception hierarchy shared across the package."""


class BrainstacksError(Exception):
    """Base class for all package errors."""


class DimensionError(BrainstacksError, ValueError):
    """Operand shapes are incompatible."""


class RoutingError(BrainstacksError):
    """Router produced an unusable gate distribution."""


class TrainingInstabilityError(BrainstacksError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message: str, param_name: str | None = None):
        super().__init__(message)
        self.param_name = param_name


class StateError(BrainstacksError):
    """Operation is not valid in the object's current state."""


class DataError(BrainstacksError, ValueError):
    """Input data is insufficient or malformed."""


class NumericError(BrainstacksError, ValueError):
    """A numerical precondition (orthonormality, rank) does not hold."""


class StorageError(BrainstacksError):
    """A stored artifact is missing or unreadable."""


class CorruptionError(StorageError):
    """Content hash does not match the stored bytes."""


class FormatError(StorageError):
    """File header or layout does not match the declared format."""


class IncompatibilityError(StorageError):
    """Artifact was produced against a different base model."""


class LeakageError(BrainstacksError):
    """A prompt appears in both the train and validation split."""


class PrerequisiteError(BrainstacksError):
    """A required artifact from an earlier command is missing."""


class ConfigError(BrainstacksError, ValueError):
    """A run configuration is missing, malformed or inconsistent."""
