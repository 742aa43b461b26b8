"""Failure classes shared across the package.

Each class maps to one CLI exit code so scripted callers can
distinguish bad configuration from bad data from numeric blowups.
"""


class NvtmError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(NvtmError):
    """Invalid configuration value, unknown key, or inconsistent preset."""

    exit_code = 2


class FormatError(NvtmError):
    """Malformed or truncated file, bad magic, unreadable frame."""

    exit_code = 3


class NumericError(NvtmError):
    """Non-finite value where a finite one is required."""

    exit_code = 4


class DimensionError(NvtmError):
    """Shape or extent mismatch between arrays that must conform."""

    exit_code = 5
