"""Error types shared across the library.

All inherit from ValueError so callers that don't care about the
distinction can catch one base class.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ValueError):
    """Tensor shapes do not conform to the operation."""


class DomainError(ValueError):
    """Input is outside the mathematical domain of the operation."""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image/label counts) do not."""


class ConfigError(ValueError):
    """An experiment config file is invalid."""
