"""Exception hierarchy shared by every bgsnet module."""


class BGSError(Exception):
    """Base class for all errors raised by bgsnet."""


class ShapeError(BGSError, ValueError):
    pass


class DomainError(BGSError, ValueError):
    pass


class NumericError(BGSError, ArithmeticError):
    pass


class FormatError(BGSError, ValueError):
    """A file could not be parsed (bad magic, version, truncation, JSON)."""


class ValidationError(BGSError, ValueError):
    """Parsed data violates a dataset or split invariant."""


class SamplingError(BGSError, ValueError):
    pass


class ConfigError(BGSError, ValueError):
    pass


class StageError(BGSError, RuntimeError):
    """A training stage failed; ``stage`` names which one."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
