"""Exception hierarchy shared by the library and the command-line driver."""


class SparseFpcaError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(SparseFpcaError, ValueError):
    exit_code = 2


class DataError(SparseFpcaError, ValueError):
    exit_code = 3


class NumericalError(SparseFpcaError, ArithmeticError):
    exit_code = 4
