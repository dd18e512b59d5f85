"""Exception types shared across the package."""


class MoELabError(Exception):
    """Base class for all errors raised by moelab."""


class DimensionError(MoELabError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(MoELabError, ValueError):
    """A scalar or structural argument is outside its valid range."""


class ConsistencyError(MoELabError, ValueError):
    """Inputs that must agree with each other do not (checkpoints, configs)."""


class KindError(ConsistencyError):
    """A checkpoint of the wrong kind (dense vs moe) was supplied."""


class CheckpointFormatError(MoELabError):
    """A checkpoint on disk is malformed or fails its checksum."""


class TrainingAborted(MoELabError):
    """Raised when the training loop hits a non-finite loss.

    ``record`` carries the diagnostic metrics of the offending step.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
