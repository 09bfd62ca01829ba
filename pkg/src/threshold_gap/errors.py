"""Exception hierarchy shared across the toolkit.

DataError maps to CLI exit code 1, ConfigError to exit code 2.
"""


class ThresholdGapError(Exception):
    """Base class for all toolkit errors."""


class DataError(ThresholdGapError):
    """Malformed or inconsistent input data (duplicate keys, unknown ids, ...)."""


class ConfigError(ThresholdGapError):
    """Invalid configuration or parameters (bad percentiles, bad windows, ...)."""
