"""Error taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4.
"""


class LangFieldError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LangFieldError):
    """Invalid configuration value or inconsistent option combination."""


class DataFormatError(LangFieldError):
    """Malformed, truncated, or inconsistent input artifact."""


class NumericalError(LangFieldError):
    """Non-finite values or numerical divergence during computation."""
