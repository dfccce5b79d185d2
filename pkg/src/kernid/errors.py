"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class KernidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(KernidError):
    """Invalid configuration: bad flag combinations, malformed config files."""


class DataError(KernidError):
    """Invalid input data: corpus, graph descriptor, parameter or model files."""


class NumericError(KernidError):
    """Numerical failure, e.g. NaN/Inf detected in a trained model."""
