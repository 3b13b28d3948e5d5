"""Exception hierarchy shared by every stage."""


class SmsError(Exception):
    """Base class for all package errors."""


class ArgumentError(SmsError, ValueError):
    pass


class FormatError(SmsError):
    """A file does not match its binary or JSON layout."""


class DataError(SmsError):
    """Well-formed input carrying unusable values (non-finite, inconsistent dims, missing ids)."""


class IoError(SmsError, OSError):
    pass


class OracleUnavailable(SmsError):
    """The remote loss process exited or closed its output."""


class ProtocolError(SmsError):
    pass


class BudgetError(SmsError):
    """The evaluation budget cannot cover even the initial solution."""


class CapacityError(SmsError):
    pass


class DivergenceError(SmsError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")
