"""Exception hierarchy shared across the package."""


class FilterError(Exception):
    """Base class for all package errors."""


class DimensionError(FilterError, ValueError):
    pass


class LabelError(FilterError, ValueError):
    pass


class NormalizationError(FilterError, ValueError):
    pass


class NumericError(FilterError, ArithmeticError):
    pass


class ContractError(FilterError, RuntimeError):
    pass


class ConfigError(FilterError, ValueError):
    pass


class CompatibilityError(ConfigError):
    pass


class DataError(FilterError, ValueError):
    pass


class VocabularyError(DataError):
    pass


class LengthError(DataError):
    pass
