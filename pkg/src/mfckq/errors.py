"""Exception hierarchy shared by every module."""


class MfcError(Exception):
    """Base class for toolkit errors."""


class DimensionError(MfcError, ValueError):
    pass


class ConfigurationError(MfcError, ValueError):
    pass


class ContractError(MfcError, ValueError):
    """An input violates an operation's precondition (bad distribution, mask breach, ...)."""


class ResourceError(MfcError, RuntimeError):
    pass


class CoverageError(MfcError, RuntimeError):
    """Exploration hit its step cap before every net cell was visited."""

    def __init__(self, message: str, unvisited):
        super().__init__(message)
        self.unvisited = unvisited


class ConvergenceError(MfcError, RuntimeError):
    def __init__(self, message: str, deltas):
        super().__init__(message)
        self.deltas = list(deltas)
