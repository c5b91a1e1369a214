"""Exception types shared across the package."""


class ConnAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(ConnAlignError, ValueError):
    pass


class NonFiniteError(ConnAlignError, FloatingPointError):
    pass


class ConfigError(ConnAlignError, ValueError):
    pass


class ValidationError(ConnAlignError, ValueError):
    """Input data violates a documented invariant."""


class CheckpointError(ConnAlignError, IOError):
    pass
