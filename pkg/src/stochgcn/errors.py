"""Exception types shared across the package."""


class SgcnError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SgcnError, ValueError):
    pass


class InvalidConfigError(SgcnError, ValueError):
    pass


class DisconnectedGraphError(SgcnError):
    pass


class DegenerateGraphError(SgcnError):
    pass


class ContractViolationError(SgcnError, RuntimeError):
    """A cache or state object was used outside the call it belongs to."""


class NumericError(SgcnError, FloatingPointError):
    """Non-finite loss or gradient during training."""


class DataError(SgcnError):
    """Dataset on disk is missing, malformed or inconsistent."""
