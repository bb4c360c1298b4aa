"""Exception types raised by the simulator.

The command line maps ConfigError to exit code 1 and every other failure to 2.
"""


class FLSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FLSimError, ValueError):
    """Invalid, missing or unknown configuration value."""


class SchemaError(FLSimError, ValueError):
    """Dimension or layer-layout mismatch between model, data and plans."""


class NumericError(FLSimError, ArithmeticError):
    """Non-finite loss, update or eigenvalue estimate."""


class FormatError(FLSimError, ValueError):
    """Malformed dataset file."""
