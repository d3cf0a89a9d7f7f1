"""Exception types; ``exit_code`` is what the CLI returns for each."""


class CbcfError(Exception):
    exit_code = 1


class ConfigError(CbcfError, ValueError):
    exit_code = 1


class DataError(CbcfError, ValueError):
    exit_code = 2


class NumericalError(CbcfError, ArithmeticError):
    exit_code = 3
