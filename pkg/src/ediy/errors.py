"""Exception hierarchy shared by every ediy module."""


class EdiyError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EdiyError, ValueError):
    pass


class IngestionError(EdiyError, OSError):
    pass


class DimensionError(EdiyError, ValueError):
    pass


class PreconditionError(EdiyError, ValueError):
    pass


class UsageError(EdiyError, RuntimeError):
    pass


class NumericError(EdiyError, FloatingPointError):
    pass


class StructuralError(EdiyError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class IntegrityError(EdiyError, OSError):
    pass


class IncompatibleCheckpointError(EdiyError, ValueError):
    pass
