"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: usage errors exit 2, data
errors 3, convergence errors 4.
"""


class EdgeflowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(EdgeflowError):
    """Bad arguments or configuration (unknown keys, invalid ranges)."""

    exit_code = 2


class DataError(EdgeflowError):
    """Input data that cannot be processed as requested."""

    exit_code = 3


class FormatError(DataError):
    """Malformed or unsupported file content."""


class DegenerateInputError(DataError):
    """Input is valid but degenerate for the operation (e.g. zero variance)."""


class CapacityError(DataError):
    """Input exceeds a configured processing capacity."""


class ConvergenceError(EdgeflowError):
    """An iterative procedure failed to reach its target."""

    exit_code = 4

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved
