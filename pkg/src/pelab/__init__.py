"""pelab: positional-encoding lab for dual-path TF source separation."""

from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor, backward, finite_diff_check

__all__ = [
    "ConfigError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "finite_diff_check",
]

__version__ = "0.1.0"
