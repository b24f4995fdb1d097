"""Exception hierarchy shared across the package."""


class SGMPError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SGMPError, ValueError):
    pass


class RankError(SGMPError, ValueError):
    pass


class NumericError(SGMPError, ArithmeticError):
    """A value or gradient became non-finite."""


class ValidationError(SGMPError, ValueError):
    pass


class DataError(SGMPError, ValueError):
    pass


class GeometryError(SGMPError, ValueError):
    pass


class ConfigError(SGMPError, ValueError):
    pass


class ParseError(SGMPError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(SGMPError, RuntimeError):
    pass


class EvaluationError(SGMPError, RuntimeError):
    pass
