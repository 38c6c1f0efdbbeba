"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VarpruneError(Exception):
    exit_code = 1


class ConfigError(VarpruneError, ValueError):
    """Invalid configuration, hyperparameter, or argument."""

    exit_code = 2


class DataError(VarpruneError, ValueError):
    """Unreadable, malformed, or insufficient input data."""

    exit_code = 3


class IngestionError(DataError):
    def __init__(self, path, row, message):
        self.path = str(path)
        self.row = row
        where = f"{self.path}" if row is None else f"{self.path}, row {row}"
        super().__init__(f"{where}: {message}")


class CalibrationError(DataError):
    pass


class NumericError(VarpruneError, ArithmeticError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    """Array dimensions disagree with the model or with each other."""
