"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalFailure(ArithmeticError):
    """Raised when an iterative routine fails to converge or a value becomes non-finite.

    Parameters
    ----------
    message : str
        Human readable description.
    partial : object, optional
        Whatever the routine had computed before giving up.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DivergenceError(NumericalFailure):
    """Training produced a non-finite loss or gradient."""


class GraphError(TypeError):
    """An unsupported operation was used while building a differentiable graph."""
