"""Exception hierarchy shared across the pipeline."""


class FrameSelectError(Exception):
    """Base class for all package errors."""


class DomainError(FrameSelectError):
    """Invalid arguments or data for an operation (CLI exit code 1)."""


class ConfigError(FrameSelectError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class BackendError(FrameSelectError):
    """Chat backend transport failure. Safe to retry."""


class StoreError(DomainError):
    """Corrupt, truncated, or version-incompatible persisted file."""


class TrainingError(FrameSelectError):
    """Training aborted, e.g. on a non-finite loss."""
