class GrowTASError(Exception):
    """Base class for all package errors."""


class DimensionError(GrowTASError, ValueError):
    pass


class InputError(GrowTASError, ValueError):
    pass


class ConfigurationError(GrowTASError, ValueError):
    pass


class CapacityError(GrowTASError):
    pass


class NumericError(GrowTASError, ArithmeticError):
    pass


class FormatError(GrowTASError, ValueError):
    pass


class DataError(GrowTASError, ValueError):
    pass


class CorruptionError(GrowTASError):
    pass


class VersionError(GrowTASError):
    pass
