"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LMCGError(Exception):
    exit_code = 1


class ConfigError(LMCGError):
    exit_code = 2


class DataError(LMCGError):
    exit_code = 3


class CheckpointError(LMCGError):
    """Checkpoint I/O failure. ``reason`` is one of the short codes below."""

    exit_code = 4

    VERSION = "version-mismatch"
    TRUNCATED = "truncated"
    CHECKSUM = "checksum"
    UNKNOWN_TENSOR = "unknown-tensor"
    BAD_MAGIC = "bad-magic"
    CONFIG_HASH = "config-hash"
    MISSING = "missing"

    def __init__(self, reason: str, message: str):
        super().__init__(f"[{reason}] {message}")
        self.reason = reason


class NumericError(LMCGError):
    exit_code = 5


class ShapeError(ValueError):
    pass


class NonFiniteError(NumericError, FloatingPointError):
    pass
