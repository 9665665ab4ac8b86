"""Exception hierarchy. Every error maps to a CLI exit code."""


class ZoneCSIError(Exception):
    exit_code = 1


class ConfigError(ZoneCSIError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 2


class DataError(ZoneCSIError, ValueError):
    """Bad input data: degenerate datasets, empty zones, out-of-domain positions."""

    exit_code = 3


class DegenerateInputError(DataError):
    pass


class OutOfDomainError(DataError):
    pass


class EmptyZoneError(DataError):
    def __init__(self, zone_id, message=None):
        self.zone_id = zone_id
        super().__init__(message or f"zone {zone_id} received no samples; reduce B or re-seed")


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, expected, actual, offset=None):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated file: expected {expected} bytes, got {actual}", offset)


class CorruptBundleError(FormatError):
    pass


class NumericFailure(ZoneCSIError, ArithmeticError):
    """Non-finite values during training or evaluation."""

    exit_code = 4
