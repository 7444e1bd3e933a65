"""Exception hierarchy shared across the package."""


class LDNetError(Exception):
    """Base class for all package errors."""


class ShapeError(LDNetError, ValueError):
    """Array dimensions do not match what the operation expects."""


class InvalidArchitectureError(LDNetError, ValueError):
    pass


class InvalidRangeError(LDNetError, ValueError):
    pass


class DomainError(LDNetError, ValueError):
    """A time or point lies outside the domain where it can be evaluated."""


class DivergenceError(LDNetError, ArithmeticError):
    """A non-finite value appeared in a trajectory, loss or gradient.

    ``step`` holds the Euler step (or optimizer epoch) where it was detected,
    ``stage`` optionally names the optimizer stage.
    """

    def __init__(self, message, step=None, stage=None):
        super().__init__(message)
        self.step = step
        self.stage = stage


class InvalidSpecError(LDNetError, ValueError):
    pass


class InvalidDatasetError(LDNetError, ValueError):
    pass


class InvalidStartError(LDNetError, ValueError):
    pass


class SolverError(LDNetError, RuntimeError):
    pass


class IllConditionedKernelError(LDNetError, ArithmeticError):
    pass


class ProtocolError(LDNetError, ValueError):
    pass


class RankError(LDNetError, ValueError):
    pass


class DegenerateBasisError(LDNetError, ArithmeticError):
    pass


class UnsupportedDatasetError(LDNetError, ValueError):
    pass


class UndefinedCorrelationError(LDNetError, ArithmeticError):
    pass


class ConfigError(LDNetError, ValueError):
    pass


class AlignmentError(LDNetError, IndexError):
    """Predictions and references do not share the same index sets."""
