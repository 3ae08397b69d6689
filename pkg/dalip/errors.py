"""
    Exception types raised by the toolkit.

    Every error derives from DalipError. Errors that stand for a numeric failure (as opposed to bad input)
    also derive from NumericFailure, which the command line maps to exit code 2.
"""


class DalipError(Exception):
    """ Base class for all toolkit errors """

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class NumericFailure:
    """ Marker mixin for errors caused by numeric failure rather than invalid input """


class ShapeError(DalipError):
    """ Operand shapes don't fit the operation """


class ParameterError(DalipError):
    """ A scalar parameter is outside its allowed range """


class ContractError(DalipError):
    """ A precondition of an operation was violated by the caller """


class ConfigurationError(DalipError):
    """ A structural setting (head count, dataset spec, manifest) can't be satisfied """


class ConfigValidationError(ConfigurationError):
    """ A run config value is invalid. Carries the dotted path of the offending key """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class EmptyBatchError(DalipError):
    """ A loss was evaluated on zero rows """


class EmptySplitError(DalipError):
    """ An evaluation split holds no samples """


class UnderdeterminedError(DalipError):
    """ Too few distinct observations to fit a law """


class DegenerateFitError(DalipError):
    """ The linear sub-problem of a fit is singular """


class DegenerateSlopeError(DalipError):
    """ Opposite exponents make the closed-form optimum undefined """


class DegenerateSampleError(DalipError):
    """ Too few tokens for a sample statistic """


class BlobFormatError(DalipError):
    """ A tensor blob file is malformed """


class CsvParseError(DalipError):
    """ A CSV input is malformed. Carries the 1-based line number """

    def __init__(self, path, line, message):
        super().__init__(f"{path}, line {line}: {message}")
        self.path = path
        self.line = line


class DeterminismError(DalipError, NumericFailure):
    """ Two evaluations of the same function disagreed """


class NonFiniteError(DalipError, NumericFailure):
    """ An operation produced NaN or Inf """


class AgreementError(DalipError, NumericFailure):
    """ A closed-form result and its numeric cross-check disagree """


class GradCheckFailed(DalipError, NumericFailure):
    """ Analytic and numeric gradients disagree beyond tolerance """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DivergenceError(DalipError, NumericFailure):
    """ Training produced a non-finite loss. Carries a diagnostics dictionary """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
