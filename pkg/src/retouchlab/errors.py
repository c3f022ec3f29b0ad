"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class InvalidInputError(ValueError):
    """Input values violate a documented precondition (range, binarity, bounds)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or incompatible."""


class ConfigError(ValueError):
    """Run configuration is invalid or incomplete."""
