"""Exception types shared across the package."""


class MetapromptError(Exception):
    """Base class for all package errors."""


class ShapeError(MetapromptError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MetapromptError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(MetapromptError, ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConfigError(MetapromptError, ValueError):
    """A configuration file or object is invalid or inconsistent."""


class SamplingError(ContractError):
    """An episode could not be sampled under the requested sizes."""
