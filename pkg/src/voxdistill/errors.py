"""Exception types raised by voxdistill contracts."""


class VoxdistillError(Exception):
    """Base class for all library errors."""


class DimensionError(VoxdistillError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(VoxdistillError, ValueError):
    """A documented precondition or postcondition was violated."""


class DomainError(VoxdistillError, ValueError):
    """Input outside the mathematical domain of an operation."""


class RangeError(VoxdistillError, ValueError):
    """Integer value outside its documented range."""


class DegenerateRowError(VoxdistillError, ValueError):
    """A softmax / attention row has no unmasked entries."""


class ConfigError(VoxdistillError, ValueError):
    """Invalid, inconsistent, or unknown configuration."""


class EmptyInputError(VoxdistillError, ValueError):
    """An operation that requires at least one element got none."""


class AlignmentError(VoxdistillError, ValueError):
    """Two structures that must share indexing do not."""


class DivergenceError(VoxdistillError, RuntimeError):
    """Training produced a non-finite loss term."""


class GenerationError(VoxdistillError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class CheckpointError(VoxdistillError, ValueError):
    """Malformed or incompatible checkpoint file."""
