"""
Exception hierarchy shared by every module.

Each error carries the process exit code the command-line front end uses
when the error escapes a subcommand.
"""


class KprError(Exception):
    """Base class for all kernel-penalized regression errors"""
    exit_code = 1


class InputError(KprError):
    """Problem with user-supplied data or flags"""
    exit_code = 2


class ParseError(InputError):
    """
    Malformed input text.

    Args:
        message (str): What went wrong
        row (int, optional): 1-based data row of the offending cell
        col (int, optional): 1-based data column of the offending cell
        position (int, optional): 0-based character offset (Newick input)
    """
    def __init__(self, message, row=None, col=None, position=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"col {col}")
        if position is not None:
            where.append(f"position {position}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.col = col
        self.position = position


class SchemaError(InputError):
    """Identifiers or dimensions of two objects do not line up"""


class DomainError(InputError):
    """Argument outside the mathematical domain of an operation"""


class UsageError(InputError):
    """Invalid combination of command-line options"""


class NumericalError(KprError):
    """A computation could not be completed to the required accuracy"""


class NotPSDError(NumericalError):
    """Matrix has an eigenvalue below the tolerated negative level"""


class SingularKernelError(NumericalError):
    """Kernel is not positive definite even after jitter"""


class SingularSystemError(NumericalError):
    """Linear system is numerically singular"""


class ConvergenceError(NumericalError):
    """Iterative solver exhausted its iteration budget"""


class CalibrationError(NumericalError):
    """Noise calibration could not bracket its target"""


class IoError(KprError):
    """Reading or writing an artifact failed"""
