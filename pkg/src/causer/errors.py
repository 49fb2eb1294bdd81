"""Exception hierarchy shared by all causer modules."""


class CauserError(Exception):
    """Base class for every error raised on purpose by this package."""


class UsageError(CauserError, ValueError):
    """A function was called with arguments that violate its contract."""


class DimensionError(UsageError):
    """Array shapes do not line up."""


class NumericError(CauserError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ParseError(CauserError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class SpecError(UsageError):
    """Invalid synthetic-data specification (e.g. a cyclic planted graph)."""


class TrainingDivergence(CauserError):
    def __init__(self, epoch, message="loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")
