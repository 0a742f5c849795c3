"""Exception hierarchy shared by all modules."""


class SelfSimError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(SelfSimError, ValueError):
    pass


class InconsistencyError(SelfSimError):
    """A kernel failed a structural check (e.g. stationarity after Lamperti)."""


class ExpansionNotApplicableError(SelfSimError):
    pass


class NumericalDegeneracyError(SelfSimError):
    pass


class ShapeError(SelfSimError, ValueError):
    pass


class UnsupportedOperationError(SelfSimError):
    pass


class UndefinedRatioError(SelfSimError, ZeroDivisionError):
    pass


class QuadratureError(SelfSimError):
    pass


class HorizonError(SelfSimError):
    pass


class EstimationFailureError(SelfSimError):
    pass


class ResourceError(SelfSimError):
    pass


class ConfigError(SelfSimError):
    """Bad configuration; ``line`` points into the config file when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
