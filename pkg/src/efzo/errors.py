"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A parameter or config value is invalid for the requested operation."""


class InputError(ValueError):
    """An input array is malformed (wrong shape, NaN, inf)."""


class NumericalError(ArithmeticError):
    """A loss evaluation produced a non-finite value."""

    def __init__(self, message, x=None, t=None, agent=None):
        super().__init__(message)
        self.x = x
        self.t = t
        self.agent = agent


class DivergenceError(RuntimeError):
    """An iterate left the finite region or blew past the divergence guard."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
