"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class FusionHashError(Exception):
    """Base class for all package errors."""


class ConfigError(FusionHashError):
    """Invalid configuration value or combination."""


class ShapeError(FusionHashError, ValueError):
    """Tensor/array shapes incompatible with the requested operation."""


class DataError(FusionHashError):
    """Problem with input data files or datasets."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """File ends before the payload promised by its header."""


class HeaderMismatchError(DataError):
    """File header disagrees with the dimensions the caller requires."""


class DatasetTooSmallError(ConfigError):
    """Dataset has too few records for the requested split."""


class NumericError(FusionHashError):
    """Numeric guard tripped (zero norm, invalid probability vector, ...)."""


class DivergenceError(FusionHashError):
    """Training produced a non-finite loss term."""
