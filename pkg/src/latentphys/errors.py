"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(RuntimeError):
    """Dataset generation or loading failure (e.g. rejection-sampling
    stall, malformed file)."""


class NumericError(RuntimeError):
    """Non-finite value produced during computation or optimization."""
