"""Exception hierarchy shared across the package."""


class DepthMVDError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDepth(DepthMVDError):
    """Backprojection was asked for a depth <= 0."""


class BehindCamera(DepthMVDError):
    """Projection of a point at or behind the camera near plane."""


class NotPSD(DepthMVDError):
    """A matrix required to be positive semidefinite is not."""


class SingularCovariance(DepthMVDError):
    """A covariance inversion failed even after regularization."""


class NotConverged(DepthMVDError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class TooFewViews(DepthMVDError):
    """Multiview disagreement requires at least two views."""


class EmptyFrame(DepthMVDError):
    """A depth map contained no valid pixels."""


class ShapeMismatch(DepthMVDError):
    """Array arguments that must share a shape do not."""


class NoValidPixels(DepthMVDError):
    """A metric was evaluated over an empty valid-pixel set."""


class IngestionError(DepthMVDError):
    """Base class for dataset loading failures."""


class MissingIntrinsics(IngestionError):
    """Sequence root lacks an intrinsics file."""


class PoseCountMismatch(IngestionError):
    """Pose trajectory length disagrees with the frame count."""


class CorruptDepthFile(IngestionError):
    """A depth/variance map failed to parse; message names the path."""


class SceneParseError(DepthMVDError):
    """Synthetic scene file is malformed; message carries the line number."""


class NoVisibleGeometry(DepthMVDError):
    """A synthetic frame's rays hit no primitive at all."""


class ConfigError(DepthMVDError):
    """An engine/CLI configuration value is out of range; names the key."""
