"""Exception types raised by the solvers."""


class NumericalFailure(RuntimeError):
    """A numerical self-check failed; ``residual`` carries the offending size."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class BlowupError(NumericalFailure):
    """Non-finite values appeared while marching a Riccati solver."""

    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class DomainError(ValueError):
    """Argument outside the domain where a quantity is defined."""
