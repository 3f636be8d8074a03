"""Exception hierarchy shared by every module."""


class SjeaError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(SjeaError):
    """An operation was called with arguments that break its preconditions
    (shape mismatch, wrong mode, non-scalar loss, ...)."""


class NumericDomainError(SjeaError):
    """Arguments are shape-valid but numerically out of domain
    (division by zero, unbiased variance over a single sample, ...)."""


class ConfigError(SjeaError):
    """A configuration is internally inconsistent or out of range."""


class FormatError(SjeaError):
    """An on-disk artifact does not match its documented binary/text format."""


class CorruptionError(FormatError):
    """A file failed its integrity footer (truncated or bit-rotted)."""


class SchemaError(SjeaError):
    """A well-formed container holds names/shapes the loader does not expect."""


class TrainingDivergence(SjeaError):
    """Training produced a non-finite loss.  Carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
