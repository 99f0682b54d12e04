"""Exception taxonomy shared by all modules."""


class StateBenchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(StateBenchError):
    """A config, shape, or size is invalid or infeasible."""


class DataError(StateBenchError):
    """An input value is outside its legal domain (bad id, bad index)."""


class UsageError(StateBenchError):
    """An API was called in an unsupported way (e.g. non-scalar backward root)."""


class InternalError(StateBenchError):
    """An invariant the package itself maintains was violated."""


class DivergedError(StateBenchError):
    """Training produced NaN loss or gradients; the run is marked diverged,
    which counts as an unsuccessful configuration rather than a crash."""
