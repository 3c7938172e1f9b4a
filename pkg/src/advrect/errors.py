"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(ValueError):
    """Base class for binary file format errors."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(FormatError):
    """File version is not supported by this reader."""


class Truncated(FormatError):
    """File ends before the declared payload is complete."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; carries the offending epoch."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training loss became non-finite at epoch {epoch}")


class UndefinedCorrelation(ValueError):
    """Pearson correlation is undefined (zero variance in a coordinate)."""


class ConfigError(ValueError):
    """Experiment configuration file is malformed or inconsistent."""
