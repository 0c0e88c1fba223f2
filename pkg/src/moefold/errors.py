"""Exception types shared across the package.

Every raised error names the violated constraint so CLI output stays
machine-parsable.
"""


class ValidationError(ValueError):
    """A precondition or config constraint was violated."""

    def __init__(self, message: str, *, constraint: str = ""):
        super().__init__(message)
        self.constraint = constraint or message


class NumericError(ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ProtocolError(RuntimeError):
    """A collective was used inconsistently across ranks, or an internal
    invariant of the simulated communication engine was breached."""
