"""Federated learning simulator with per-sample dynamic channel pruning."""

from feddp.errors import (
    ConfigError,
    FeddpError,
    FormatError,
    NumericError,
    PartitionError,
    StructuralError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FeddpError",
    "FormatError",
    "NumericError",
    "PartitionError",
    "StructuralError",
    "UsageError",
]
