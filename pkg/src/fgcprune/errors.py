"""Exception types shared across the package."""


class FGCError(Exception):
    """Base class for package errors."""


class ConfigError(FGCError, ValueError):
    """Invalid configuration or geometry, detected before any compute."""


class DimensionError(FGCError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FGCError, RuntimeError):
    """A call violated an operation's preconditions."""


class NumericError(FGCError, FloatingPointError):
    """A computation produced NaN or infinity."""


class DataFormatError(FGCError, ValueError):
    """A dataset file is malformed."""
