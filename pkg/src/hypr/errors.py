"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numeric failures with 3, verification failures with 1.
"""


class HyprError(Exception):
    """Base class for all package errors."""


class ConfigError(HyprError):
    """Invalid configuration, dimensions, flags, or input files."""


class DataFormatError(ConfigError):
    """Malformed binary input (bad magic, truncation, checksum mismatch)."""


class NumericError(HyprError):
    """Non-finite values or numeric overflow during simulation/training."""
