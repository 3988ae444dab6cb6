"""
Exception hierarchy for xens.

Every fatal condition raises a subclass of XensError; the CLI turns these into a
single-line error and exit code 1.
"""


class XensError(Exception):
    """Base class for all xens failures."""


class DataError(XensError):
    """Missing inputs, empty classes, malformed manifests or plan files."""


class ConfigError(XensError):
    """Unknown or invalid configuration keys, unresolved paths."""


class ModelError(XensError):
    """Archive mismatches, digest failures, invalid model assembly or input shapes."""


class TrainingError(XensError):
    """Failures during optimization (non-finite loss, empty streams)."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}" + (f", batch {batch})" if batch is not None else ")")
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
