class HrtError(Exception):
    """Base class for all package errors."""


class DimensionError(HrtError, ValueError):
    pass


class ConfigError(HrtError, ValueError):
    pass


class CapacityError(HrtError, ValueError):
    pass


class InputError(HrtError, ValueError):
    pass


class DegenerateMaskError(HrtError, ValueError):
    pass


class DivergenceError(HrtError, RuntimeError):
    pass
