"""Exception taxonomy shared by every module in the package."""


class HieroLoraError(Exception):
    """Base class for all package-raised errors."""


class DimensionError(HieroLoraError):
    """Operand shapes do not conform."""


class NumericError(HieroLoraError):
    """Non-finite values or numeric breakdown."""


class ContractError(HieroLoraError):
    """An operation was called outside its stated contract."""


class StateError(HieroLoraError):
    """Object used in an invalid lifecycle state (e.g. double backward)."""


class ConfigError(HieroLoraError):
    """Invalid or inconsistent configuration."""


class DataError(HieroLoraError):
    """Malformed or inconsistent data."""
