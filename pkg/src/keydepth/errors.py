"""Shared exception types.

ConfigurationError maps to CLI exit code 2 (bad flags, inconsistent inputs),
NumericalError to exit code 1 (non-finite losses, failed checks).
"""


class ConfigurationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass
