"""Exception hierarchy shared by all ostlab modules.

Three failure families map onto the CLI exit codes: bad inputs
(ValidationError, exit 1), algorithms that fail to converge or blow up
(NumericalError, exit 2), and file problems (OSError and its
TensorFormatError / TokenFileError subclasses, exit 3).
"""


class ValidationError(ValueError):
    """Raised when an argument violates a documented precondition."""


class UnsupportedDimensionError(ValidationError):
    """Raised for dimensions the algorithm cannot handle (e.g. non power of two)."""


class NumericalError(ArithmeticError):
    """Raised when an iterative method diverges or exceeds its iteration cap."""


class TensorFormatError(OSError):
    """Raised when a tensor file does not follow the OSTT v1 layout."""


class TokenFileError(OSError):
    """Raised when a token-id text file cannot be parsed.

    Carries the 1-based line number of the first offending line.
    """

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number
