"""Exception hierarchy. Each family maps onto one CLI exit code."""


class NTPromptError(Exception):
    exit_code = 1


class ConfigError(NTPromptError, ValueError):
    """Bad configuration, shapes or dimensions that do not line up."""

    exit_code = 2


class DataError(NTPromptError, ValueError):
    """Problems with the data itself: missing classes, empty domains, etc."""

    exit_code = 3


class DegenerateBatchError(DataError):
    pass


class BankConstructionError(DataError):
    def __init__(self, message, class_index=None):
        super().__init__(message)
        self.class_index = class_index


class NumericalAbort(NTPromptError, ArithmeticError):
    """Raised when a loss term goes non-finite during training."""

    exit_code = 4

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term
