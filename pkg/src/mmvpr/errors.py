"""Exception types shared across the package.

The CLI maps these onto exit codes, so every raise site should pick the
narrowest class that describes the failure.
"""


class MMVPRError(Exception):
    """Base class for all package errors."""


class DimensionError(MMVPRError, ValueError):
    pass


class ConfigError(MMVPRError, ValueError):
    pass


class ValidationError(MMVPRError, ValueError):
    pass


class ContractError(MMVPRError, ValueError):
    pass


class FormatError(MMVPRError):
    pass


class LengthError(FormatError):
    pass


class DataError(MMVPRError):
    pass


class EvaluationError(MMVPRError, ArithmeticError):
    pass
