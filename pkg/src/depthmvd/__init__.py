"""Per-pixel depth uncertainty from multiview geometric disagreement."""

__version__ = "0.1.0"

from .gauss_ot import Gaussian2, Gaussian3  # noqa: F401
from .geometry import CameraIntrinsics, Pose, RelativeTransform  # noqa: F401
