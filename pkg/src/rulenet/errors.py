"""Exception hierarchy.

Every error the library raises deliberately derives from RuleNetError, so
callers (and the CLI) can map failure classes to exit codes without string
matching.
"""

from __future__ import annotations


class RuleNetError(Exception):
    """Base class for all library errors."""


class DimensionError(RuleNetError):
    """Shape mismatch between arrays; the message names both shapes."""


class ContractError(RuleNetError):
    """An internal invariant was violated (caller or library bug)."""


class ConfigError(RuleNetError):
    """Invalid hyperparameter, fraction, metric or CLI configuration."""


class IngestionError(RuleNetError):
    """CSV could not be read into a table (ragged rows, empty file, ...)."""


class FitError(RuleNetError):
    """Preprocessing could not be fitted (e.g. an all-missing column)."""


class SchemaError(RuleNetError):
    """Table does not conform to the expected schema."""


class IndexRangeError(RuleNetError):
    """A lookup id fell outside its table; names the feature and the value."""


class DivergenceError(RuleNetError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, message: str | None = None):
        self.epoch = epoch
        self.step = step
        super().__init__(
            message
            or f"non-finite training loss at epoch {epoch}, step {step}"
        )


class CheckpointError(RuleNetError):
    """A checkpoint file could not be loaded."""


class TruncationError(CheckpointError):
    """Checkpoint file shorter than its framing claims."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class FingerprintError(CheckpointError):
    """Stored schema fingerprint does not match the stored schema."""


class StudyError(RuleNetError):
    """A hyperparameter study could not produce any result."""
