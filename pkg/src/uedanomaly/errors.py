"""Exception hierarchy shared by every stage of the pipeline."""


class AnomalyError(Exception):
    """Base class for all errors raised by uedanomaly."""


class ContractViolation(AnomalyError):
    """A precondition of an operation was not met."""


class DataError(AnomalyError):
    """Input data is empty or insufficient for the requested operation."""


class FormatError(DataError):
    """A file or text payload is malformed."""


class UnsupportedDepth(FormatError):
    pass


class SizeError(ContractViolation):
    pass


class ShapeError(ContractViolation):
    pass


class NumericError(DataError):
    pass


class StateError(ContractViolation):
    pass


class ArchitectureError(AnomalyError):
    pass


class DivergenceError(AnomalyError):
    pass


class IncompatibleModel(FormatError):
    pass


class NoSignalError(DataError):
    """An image kept no tiles after background rejection."""


class DomainError(ContractViolation):
    pass


class FitError(AnomalyError):
    pass


class ThresholdError(AnomalyError):
    pass


class EvalError(DataError):
    pass


class IoError(AnomalyError, OSError):
    pass
