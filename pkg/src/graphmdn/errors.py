"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``graphmdn.cli``).
"""


class GraphMDNError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(GraphMDNError, ValueError):
    pass


class DomainError(GraphMDNError, ValueError):
    pass


class ConfigError(GraphMDNError, ValueError):
    pass


class StateError(GraphMDNError, RuntimeError):
    pass


class NumericError(GraphMDNError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DataError(GraphMDNError):
    exit_code = 2


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IncompatibleError(DataError):
    pass


class JoinError(DataError, KeyError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def __str__(self):
        return self.args[0]


class UnsupportedError(DataError):
    pass


class DegenerateAlignmentError(GraphMDNError, ValueError):
    exit_code = 3
