"""Benchmark harness for measuring sample efficiency of sequence models
on algebraic state-tracking tasks (modular addition, permutation composition)."""

from statebench.errors import (
    ConfigurationError,
    DataError,
    DivergedError,
    InternalError,
    StateBenchError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "DivergedError",
    "InternalError",
    "StateBenchError",
    "UsageError",
]
