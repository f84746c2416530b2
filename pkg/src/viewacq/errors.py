"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2,
``DataFormatError`` -> 3, ``NumericalError`` -> 4.
"""


class ViewAcqError(Exception):
    """Base class for all package errors."""


class ConfigError(ViewAcqError, ValueError):
    pass


class ShapeError(ViewAcqError, ValueError):
    """Dimension or rank mismatch between operands."""


class NumericalError(ViewAcqError, ArithmeticError):
    """NaN/Inf produced, loss divergence, or a non-PSD covariance."""


class CovarianceError(NumericalError):
    pass


class LabelError(ViewAcqError, ValueError):
    pass


class InvalidActionError(ViewAcqError, ValueError):
    pass


class DataFormatError(ViewAcqError):
    """Malformed dataset or checkpoint file."""


class VersionMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass
