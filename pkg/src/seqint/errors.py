"""Exception hierarchy.

Input problems derive from :class:`DataError` (CLI exit code 2), numerical
failures from :class:`NumericalError` (exit code 3).
"""


class SeqIntError(Exception):
    """Base class for all package errors."""


class DataError(SeqIntError, ValueError):
    pass


class TreatmentNotBinary(DataError):
    pass


class PropensityOutOfRange(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class DuplicateName(DataError):
    pass


class TooFewRows(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row: int, column: str, value: str):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {column!r}")


class MissingValue(DataError):
    pass


class ConfigError(DataError):
    pass


class UnsupportedCalibration(ConfigError):
    pass


class InfeasibleLRT(DataError):
    pass


class NumericalError(SeqIntError, ArithmeticError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularProjection(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual norm {residual:.3g})")


class QuasiSeparation(NumericalError):
    pass


class DegenerateCandidate(NumericalError):
    pass


class AllDegenerate(NumericalError):
    pass


class TooManyDegenerateReplicates(NumericalError):
    pass


class GridTooShort(NumericalError):
    pass


class NonPSDCovariance(NumericalError):
    pass
