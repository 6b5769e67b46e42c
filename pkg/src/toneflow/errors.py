"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible shapes."""


class TimeRangeError(ValueError):
    """A step or time coordinate leaves the unit interval."""


class NumericsError(ArithmeticError):
    """Non-finite values appeared during integration or training."""


class CacheMissError(LookupError):
    """A requested (step, block) attention slot is absent from the cache."""


class WavFormatError(ValueError):
    """A WAV file is malformed or uses an unsupported encoding."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value for the given inputs (e.g. silence)."""
