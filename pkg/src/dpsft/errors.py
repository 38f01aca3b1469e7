"""Exception types shared across the library."""


class DpsftError(Exception):
    """Base class for all library errors."""


class ConfigError(DpsftError):
    """Structural mismatch: wrong dimensions, layouts, or partitions."""


class UsageError(DpsftError):
    """A precondition on arguments was violated by the caller."""


class NumericError(DpsftError):
    """Non-finite values where finite ones are required."""


class CalibrationError(DpsftError):
    """Noise calibration cannot meet the requested privacy budget."""


class IdxParseError(DpsftError):
    """Malformed IDX file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
