"""Exception types shared across the package."""


class RngtError(Exception):
    """Base class for package errors."""


class InvalidCameraError(RngtError, ValueError):
    """Camera violates its invariants (non-orthonormal rotation, bad intrinsics...)."""


class DegenerateScaleError(RngtError, ValueError):
    """Camera normalization impossible: first camera sits at the look-at origin."""


class RollNotApplicableError(RngtError, ValueError):
    """Up-direction recovery has no usable camera (not looking at origin, or all degenerate)."""


class EmptyCloudError(RngtError, ValueError):
    """Point filtering removed every point (confidence threshold too high)."""


class StaleCacheError(RngtError, RuntimeError):
    """Scene cache was built by a different model than the one querying it."""


class CacheNotSealedError(RngtError, RuntimeError):
    """Scene cache queried before it was sealed."""


class ConfigMismatchError(RngtError, ValueError):
    """Checkpoint or cache does not match the expected model configuration."""


class TrainingDivergedError(RngtError, RuntimeError):
    """Non-finite loss encountered during training."""


class ContainerFormatError(RngtError, ValueError):
    """Malformed RNGT container (bad magic, truncated payload, duplicate names...)."""
