class InputError(ValueError):
    """Bad shapes, sizes or parameter values."""


class NumericalError(ArithmeticError):
    """A solve failed; ``diagnostics`` carries solver state for reporting."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DegenerateError(NumericalError):
    """KKT differentiation refused: an active constraint has a vanishing dual."""


class UsageError(RuntimeError):
    """API misuse, e.g. backpropagating through a stale forward cache."""
