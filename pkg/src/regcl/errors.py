"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RegclError(Exception):
    exit_code = 1


class ConfigurationError(RegclError):
    exit_code = 2


class DataError(RegclError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(RegclError):
    exit_code = 4


class ContractError(RegclError):
    """A caller broke an internal precondition (wrong lengths, missing state)."""
