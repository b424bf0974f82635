"""Exception hierarchy shared across the package."""


class QTuningError(Exception):
    """Base class for every error raised by :mod:`qtuning`."""


class InvalidInputError(QTuningError, ValueError):
    pass


class InvalidArgumentError(QTuningError, ValueError):
    pass


class InvalidConfigError(QTuningError, ValueError):
    pass


class InvalidDataError(QTuningError, ValueError):
    pass


class NumericalFailureError(QTuningError, ArithmeticError):
    pass


class CapacityError(QTuningError):
    """A sequence or queue would exceed its fixed bound."""


class PreconditionError(QTuningError):
    pass


class UsageError(QTuningError, RuntimeError):
    pass


class StateError(QTuningError, RuntimeError):
    pass


class CheckpointError(QTuningError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass
