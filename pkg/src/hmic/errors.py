"""Exception types raised across the pipeline."""


class HMICError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(HMICError, ValueError):
    pass


class NumericError(HMICError, ArithmeticError):
    pass


class ArgumentError(HMICError, ValueError):
    pass


class FormatError(HMICError):
    """A file exists but its contents are not in the expected format."""


class ManifestError(FormatError):
    """Malformed manifest line; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(HMICError, ValueError):
    pass


class DegenerateInputError(HMICError, ValueError):
    pass


class AmbiguityError(HMICError):
    pass


class InsufficientTissueError(HMICError):
    pass


class ConvergenceError(HMICError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class DegenerateProfileError(HMICError, ValueError):
    pass


class DataError(HMICError):
    pass


class ConfigurationError(HMICError):
    pass


class EmptySlideError(HMICError, ValueError):
    pass
