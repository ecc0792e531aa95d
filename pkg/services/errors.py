"""
Error Types
Exception hierarchy shared by the services, the CLI and the API
"""


class BundleGraphError(Exception):
    """Base class for all bundlegraph failures"""
    exit_code = 1


class ConfigError(BundleGraphError, ValueError):
    """
    Invalid configuration

    Carries every violation found, so a bad config file is reported in one go.
    """
    exit_code = 2

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


class DataError(BundleGraphError, ValueError):
    """Missing, malformed or inconsistent dataset or checkpoint files"""
    exit_code = 3


class NumericError(BundleGraphError, ArithmeticError):
    """A loss term or gradient became NaN or infinite"""
    exit_code = 4


class ShapeError(BundleGraphError, ValueError):
    """Array arguments whose shapes do not fit together"""
