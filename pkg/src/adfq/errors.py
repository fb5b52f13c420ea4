"""Exception types shared across the toolkit.

Every error carries a stable ``exit_code`` so the CLI can map failure
classes to distinct process exit codes.
"""


class AdfqError(Exception):
    exit_code = 1


class ConfigError(AdfqError, ValueError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""

    exit_code = 2


class ShapeError(AdfqError, ValueError):
    """Operands with incompatible shapes."""

    exit_code = 4


class DomainError(AdfqError, ValueError):
    """Values outside an operation's domain (non-positive log input, etc.)."""

    exit_code = 4


class CheckpointError(AdfqError, ValueError):
    """Corrupt manifest, shape mismatch or truncated blob in a tensor file."""

    exit_code = 4


class GradCheckError(AdfqError, RuntimeError):
    """Gradient audit exceeded its tolerance."""

    exit_code = 5


class OptimizationError(AdfqError, RuntimeError):
    """Optimization diverged or produced non-finite gradients."""

    exit_code = 6
