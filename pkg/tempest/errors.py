"""Exception hierarchy shared by every tempest module."""


class TempestError(Exception):
    """Base class for all errors raised by tempest."""


class InvalidArgumentError(TempestError, ValueError):
    """An argument has the wrong shape, range or combination."""


class DomainError(TempestError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class InvalidStateError(TempestError, RuntimeError):
    """An operation was called on an object in the wrong mode."""


class NumericalFailureError(TempestError, ArithmeticError):
    """A computation produced NaN/Inf or a factorization failed."""


class EvaluationFailedError(TempestError):
    """Every evaluation of an objective failed."""
