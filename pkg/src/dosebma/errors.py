"""Exception hierarchy. The CLI maps these onto exit codes."""


class DoseBmaError(Exception):
    """Base class for all package errors."""


class ValidationError(DoseBmaError, ValueError):
    """Bad input data or configuration (CLI exit code 2)."""


class ConvergenceError(DoseBmaError, ArithmeticError):
    """A numerical procedure failed to converge (CLI exit code 3)."""
