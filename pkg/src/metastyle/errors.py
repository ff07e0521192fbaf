"""Exception hierarchy. CLI exit codes hang off these classes."""


class MetaStyleError(Exception):
    exit_code = 1


class ConfigError(MetaStyleError, ValueError):
    exit_code = 1


class DimensionError(MetaStyleError, ValueError):
    """Channel counts or array shapes do not line up."""

    exit_code = 1


class RangeError(MetaStyleError, ValueError):
    """A scalar argument lies outside the domain of the formula."""

    exit_code = 1


class DataError(MetaStyleError, ValueError):
    """Input data is malformed: non-finite values, bad labels, bad files."""

    exit_code = 2


class BankFormatError(DataError):
    pass


class NumericError(MetaStyleError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 3
