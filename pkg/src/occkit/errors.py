"""Exception types shared across the toolkit."""


class OcckitError(Exception):
    """Base class for toolkit errors."""


class ConfigError(OcckitError):
    """Invalid configuration (bad hyperparameters, inconsistent shapes)."""


class DataError(OcckitError):
    """Malformed or missing input data (files, grids, clouds)."""


class NumericalError(OcckitError):
    """Non-finite values encountered during computation."""
