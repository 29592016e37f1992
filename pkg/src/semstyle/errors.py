class SemstyleError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(SemstyleError, ValueError):
    pass


class InvalidStateError(SemstyleError, RuntimeError):
    pass


class ConfigurationError(SemstyleError, ValueError):
    pass


class UnsupportedOperationError(SemstyleError, NotImplementedError):
    pass
