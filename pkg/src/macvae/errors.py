"""Exception hierarchy shared by every stage of the engine.

The CLI maps these to process exit codes.
"""


class MacvaeError(Exception):
    exit_code = 1


class ConfigError(MacvaeError, ValueError):
    """Bad shapes, bad hyper-parameters, malformed config files."""

    exit_code = 1


class DataError(MacvaeError):
    """Missing, malformed or empty input data."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


class UnknownIdError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SamplingError(DataError):
    pass


class NumericalError(MacvaeError, FloatingPointError):
    """A non-finite value appeared; ``where`` names the op or training block."""

    exit_code = 3

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
