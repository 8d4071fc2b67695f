"""Exception types.

Two families: :class:`ValidationError` for bad inputs (CLI exit code 1) and
:class:`NumericalError` for failures of an algorithm on valid input (exit 2).
"""


class SemirepError(Exception):
    """Base class for all package errors."""


class ValidationError(SemirepError, ValueError):
    pass


class NumericalError(SemirepError, ArithmeticError):
    pass


class InvalidParamsError(ValidationError):
    pass


class ContractViolationError(ValidationError):
    pass


class IdentifiabilityError(ValidationError):
    pass


class DatasetParseError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DegenerateMissingnessError(ValidationError):
    pass


class NoDataInWindowError(NumericalError):
    pass


class SingularWindowError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, last_change=float("nan")):
        super().__init__(message)
        self.last_change = last_change


class BandwidthSelectionError(NumericalError):
    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = tuple(failed)


class RankDeficiencyError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(NumericalError):
    pass


class ExtrapolationError(NumericalError):
    def __init__(self, message, clusters=()):
        super().__init__(message)
        self.clusters = tuple(clusters)


class NearSingularOmegaError(NumericalError):
    pass


class IntegralEquationError(NumericalError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DegenerateInformationError(NumericalError):
    pass


class BootstrapUnstableError(NumericalError):
    pass


class ExperimentUnstableError(NumericalError):
    pass
