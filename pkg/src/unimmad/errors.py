"""Exception hierarchy.

Each family maps onto a CLI exit code: configuration problems exit with 2,
data/format problems with 3 and numeric failures with 4.
"""


class UmmError(Exception):
    exit_code = 1


class ConfigError(UmmError, ValueError):
    exit_code = 2


class ShapeError(UmmError, ValueError):
    exit_code = 2


class StateError(UmmError, RuntimeError):
    exit_code = 2


class DataError(UmmError):
    exit_code = 3


class FormatError(DataError, ValueError):
    pass


class IngestionError(DataError, FileNotFoundError):
    pass


class ValidationError(DataError, ValueError):
    pass


class ManifestError(DataError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else ""


class UndefinedMetricError(UmmError, ValueError):
    exit_code = 3


class NumericError(UmmError, FloatingPointError):
    exit_code = 4
