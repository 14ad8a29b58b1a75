"""Shared exception types; the CLI maps these onto exit codes."""


class SpscError(Exception):
    pass


class ConfigError(SpscError):
    """Bad or contradictory configuration (CLI exit code 2)."""


class DataError(SpscError):
    """Unusable input data (CLI exit code 3)."""


class NumericError(SpscError):
    """Non-finite values where finite ones are required (CLI exit code 4)."""


class BadMagicError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class FormatMismatchError(DataError):
    """Header/index inconsistent with the payload or with itself."""
