"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class SegNNError(Exception):
    """Base class for all errors raised by segnn."""


class ConfigError(SegNNError, ValueError):
    """Invalid configuration or argument outside an operation's preconditions."""


class DataError(SegNNError, ValueError):
    """Malformed or infeasible input data (files, corpora, episodes)."""


class ParseError(DataError):
    """A cloud or manifest file does not conform to its declared format."""

    def __init__(self, path, where, message):
        self.path = str(path)
        self.where = where
        super().__init__(f"{self.path}: {where}: {message}")


class NumericalError(SegNNError, ArithmeticError):
    """A computation produced non-finite values (e.g. diverging training)."""
