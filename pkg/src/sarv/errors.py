"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericsError -> 3.
"""


class SarvError(Exception):
    """Base for all toolkit errors."""


class ConfigError(SarvError):
    """Invalid configuration or usage."""


class DataError(SarvError):
    """Unreadable, malformed, or corrupt input data."""


class NumericsError(SarvError):
    """Non-finite values encountered during computation."""
