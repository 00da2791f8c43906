"""Exception hierarchy shared by all modules.

The CLI maps each category onto a stable exit code, so new errors should
subclass one of the categories below rather than ``LdpFedError`` directly.
"""


class LdpFedError(Exception):
    exit_code = 1


class ConfigError(LdpFedError, ValueError):
    exit_code = 2


class AccountingError(ConfigError):
    pass


class DataError(LdpFedError):
    exit_code = 3


class FormatError(DataError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LdpFedError, ArithmeticError):
    exit_code = 4


class ShapeError(LdpFedError, ValueError):
    exit_code = 4


class DomainError(LdpFedError, ValueError):
    exit_code = 4


class CapacityError(LdpFedError):
    exit_code = 4


class ProtocolError(LdpFedError):
    exit_code = 4
