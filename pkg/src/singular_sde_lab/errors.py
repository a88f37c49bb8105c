"""Exception types shared across the package."""


class InvalidDimensionError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


class FormBoundError(RuntimeError):
    """Rayleigh certification failed; ``quotient`` holds the offending value."""

    def __init__(self, message, quotient=float("nan")):
        super().__init__(message)
        self.quotient = quotient


class ExponentRangeError(ValueError):
    pass


class ConstantRecipeError(RuntimeError):
    pass


class StabilityError(ValueError):
    """Explicit stepping requested with a time step above the stability limit."""

    def __init__(self, message, suggested_tau):
        super().__init__(message)
        self.suggested_tau = suggested_tau


class SimulationError(RuntimeError):
    pass
