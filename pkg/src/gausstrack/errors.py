"""Exception types shared across the package.

The CLI maps these onto stable exit codes (validation 2, numerical 3,
I/O 4), so library code should raise the most specific one that applies.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or file-format contract."""


class NumericalAbort(RuntimeError):
    """Optimization produced a non-finite value; carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
