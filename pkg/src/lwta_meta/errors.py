"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
DivergedTaskError -> 4. Everything else is a plain bug.
"""


class LwtaMetaError(Exception):
    """Base class for all package errors."""


class DimensionError(LwtaMetaError):
    """Operand shapes do not agree."""


class NumericError(LwtaMetaError):
    """NaN/Inf where finite values are required."""


class GraphError(LwtaMetaError):
    """Autodiff graph misuse (e.g. mixing nodes across tapes)."""


class ContractError(LwtaMetaError):
    """An operation was called outside its stated contract."""


class ConfigError(LwtaMetaError):
    """Invalid configuration value or key."""


class DataError(LwtaMetaError):
    """Dataset layout or episode construction problem."""


class DivergedTaskError(LwtaMetaError):
    """Non-finite loss during inner-loop adaptation."""

    def __init__(self, message, iteration=None, step=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
