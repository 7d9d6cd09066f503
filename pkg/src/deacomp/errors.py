"""Exception types shared across the package."""


class DeacompError(Exception):
    """Base class for all package errors."""


class DomainError(DeacompError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class OutOfDomain(DomainError):
    """A query falls outside the tabulated domain of a curve or model."""


class StepFailure(DeacompError, ArithmeticError):
    """The adaptive integrator could not take an acceptable step."""


class PullInError(DeacompError, ArithmeticError):
    """The voltage-stretch curve turned over before reaching the requested end."""


class ShapeError(DeacompError, ValueError):
    """Array dimensions are inconsistent."""


class StateError(DeacompError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward without forward)."""


class DivergenceError(DeacompError, ArithmeticError):
    """Training produced a non-finite loss."""


class FormatError(DeacompError, ValueError):
    """Serialized input (checkpoint, CSV, WAV) is malformed or unsupported."""
