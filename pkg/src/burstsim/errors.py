"""Exception taxonomy shared across the package."""


class BurstSimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BurstSimError, ValueError):
    """Operands have incompatible or degenerate dimensions."""


class NonFiniteError(BurstSimError, FloatingPointError):
    """A public operation produced NaN or Inf (overflow must surface, not propagate)."""


class MaskError(BurstSimError, ValueError):
    """A mask is malformed or would leave some query row with no visible key."""


class ConfigError(BurstSimError, ValueError):
    """A run configuration violates a named constraint."""


class RingDesyncError(BurstSimError, RuntimeError):
    """A device observed an unexpected payload count or sequence number."""


class DeadlockError(BurstSimError, RuntimeError):
    """No worker made progress within the configured horizon."""


class MissingForwardError(BurstSimError, RuntimeError):
    """Backward pass requested before the forward pass populated lse and outputs."""
