"""Exception hierarchy shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain of the operation (t <= 0, non-finite input, ...)."""


class ModelError(RuntimeError):
    """A model coefficient returned something unusable; message carries the location."""


class NumericError(RuntimeError):
    """A numerical procedure failed to reach its target (quadrature, factorization, ...)."""


class IntegrationError(NumericError):
    """ODE integration broke down; ``last_state`` holds the last good (t, x)."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ValidationError(ValueError):
    """An experiment config failed validation; ``field`` names the offender."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
