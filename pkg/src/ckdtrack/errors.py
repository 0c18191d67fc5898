"""Exception types raised across the package."""


class CKDError(Exception):
    pass


class ConfigError(CKDError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(CKDError):
    """Malformed dataset on disk or an invalid annotation."""


class ContractError(CKDError, ValueError):
    """A function was called with arguments violating its preconditions."""


class NumericError(CKDError, ArithmeticError):
    """A forward pass or loss produced non-finite values."""


class CheckpointError(CKDError):
    pass
