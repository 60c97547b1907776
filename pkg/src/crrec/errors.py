"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class CrrecError(Exception):
    exit_code = 1


class ConfigError(CrrecError, ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(CrrecError, ValueError):
    """Malformed or unusable input data."""

    exit_code = 3

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class NumericError(CrrecError, ArithmeticError):
    """Non-finite value produced during computation; ``op`` names where."""

    exit_code = 4

    def __init__(self, message, op=None):
        self.op = op
        super().__init__(f"[{op}] {message}" if op else message)


class ContractViolation(CrrecError, AssertionError):
    """A caller broke a documented precondition."""

    exit_code = 1


class UndefinedMetricError(CrrecError, ValueError):
    exit_code = 3
