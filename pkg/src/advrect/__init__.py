"""Test-time adversarial sample rectification via max-min entropy
optimization, with the training, attack and measurement machinery needed
to evaluate it."""

__version__ = "0.1.0"

from . import attacks, data, diffcore, entropy_stats, models, rectifier, report
from .errors import (
    BadMagic,
    ConfigError,
    ContractViolation,
    FormatError,
    TrainingDiverged,
    Truncated,
    UndefinedCorrelation,
    VersionMismatch,
)

__all__ = [
    "attacks", "data", "diffcore", "entropy_stats", "models", "rectifier", "report",
    "BadMagic", "ConfigError", "ContractViolation", "FormatError",
    "TrainingDiverged", "Truncated", "UndefinedCorrelation", "VersionMismatch",
]
