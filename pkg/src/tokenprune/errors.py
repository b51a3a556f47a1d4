"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands are incompatible for the requested operation."""


class DistributionError(ValueError):
    """An input that must be a probability distribution is not one."""


class ContractError(RuntimeError):
    """An operation was called in a way that violates its contract."""


class FormatError(ValueError):
    """A file does not conform to its binary format."""


class IncompatibleError(ValueError):
    """A file is well-formed but incompatible with what the caller expects."""


class CorruptionError(ValueError):
    """A file failed its integrity check."""
