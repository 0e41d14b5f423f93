"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a structural requirement."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf values."""
