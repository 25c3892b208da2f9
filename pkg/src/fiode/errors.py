"""Exception types shared across the package."""


class FiodeError(Exception):
    """Base class for all package errors."""


class InvalidInput(FiodeError, ValueError):
    pass


class Infeasible(FiodeError):
    """The CBF-QP constraint set is empty."""


class NumericalFailure(FiodeError, ArithmeticError):
    pass


class DegenerateJacobian(FiodeError):
    """A non-binding coordinate sits too close to its bound to pick a branch."""


class BudgetExceeded(FiodeError):
    pass


class EmptyBand(FiodeError):
    """Rejection sampling accepted no grid point (grid too coarse or level set outside the box)."""


class DivisionBySpanningZero(FiodeError, ZeroDivisionError):
    pass


class ParseError(FiodeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
