"""Exception hierarchy shared across the package."""


class Error(Exception):
    """Base class for all package-specific errors."""


class DimensionError(Error):
    """Array shapes or parameter lengths do not compose."""


class ArgumentError(Error):
    """An argument value is outside its documented domain."""


class LabelError(Error):
    """A class label falls outside the admissible class set."""


class NumericError(Error):
    """A computation produced a non-finite value."""


class CapacityError(Error):
    """A configured size cap was exceeded."""


class ConfigurationError(Error):
    """An experiment or attack configuration is invalid."""


class ContractError(Error):
    """A call violates a documented precondition between modules."""


class ParseError(Error):
    """A file could not be parsed; the message names the offending line."""


class IntegrityError(Error):
    """A stored artifact is inconsistent with its manifest."""


class UndefinedValueError(Error):
    """The requested quantity is undefined for the given input."""
