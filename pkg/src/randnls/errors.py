"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class NumericalError(ArithmeticError):
    """An iterative computation failed to converge or broke down.

    ``context`` carries whatever values are useful for diagnosing the
    failure (arguments, last residual, iteration count).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class ConfigurationError(ValueError):
    """A solver or experiment was configured inconsistently."""


class InterfaceError(ValueError):
    """A user-supplied callable returned something of the wrong shape."""
