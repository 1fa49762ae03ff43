"""Hierarchical resolution transformer on a small numpy autodiff engine."""
__version__ = "0.1.0"

from .config import HrtConfig  # noqa: E402
from .errors import (  # noqa: E402
    CapacityError,
    ConfigError,
    DegenerateMaskError,
    DimensionError,
    DivergenceError,
    HrtError,
    InputError,
)
from .model import HrtModel  # noqa: E402

__all__ = [
    "HrtConfig",
    "HrtModel",
    "HrtError",
    "CapacityError",
    "ConfigError",
    "DegenerateMaskError",
    "DimensionError",
    "DivergenceError",
    "InputError",
]
