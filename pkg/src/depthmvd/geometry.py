"""Camera model, rigid transforms, and projection of points and Gaussians.

Conventions: poses are camera-to-world (x_world = R @ x_cam + T); the camera
frame is x right, y down, z forward; pixel coordinates are (u, v) with u along
image width. All operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NonPositiveDepth
from .gauss_ot import Gaussian2, Gaussian3

# Near-plane guard for the 1/z^2 Jacobian singularity. Gaussians with mean
# z <= Z_MIN are excluded from projection-based correspondence.
Z_MIN = 1e-3

_ORTHO_TOL = 1e-9


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Vectorized in-bounds test for (..., 2) pixel coordinates."""
        uv = np.asarray(uv)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


@dataclass
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (||R^T R - I|| = {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has determinant -1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def camera_to_world(self, x_cam: np.ndarray) -> np.ndarray:
        return np.asarray(x_cam) @ self.rotation.T + self.translation

    def world_to_camera(self, x_world: np.ndarray) -> np.ndarray:
        return (np.asarray(x_world) - self.translation) @ self.rotation


@dataclass
class RelativeTransform:
    """Maps the camera frame at image i-1 into the frame at image i."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "RelativeTransform":
        return RelativeTransform(np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.rotation.T + self.translation


def relative_transform(prev: Pose, curr: Pose) -> RelativeTransform:
    """Transform taking points in prev's camera frame to curr's camera frame."""
    r_rel = curr.rotation.T @ prev.rotation
    t_rel = curr.rotation.T @ (prev.translation - curr.translation)
    return RelativeTransform(r_rel, t_rel)


def backproject(uv, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel with known depth to a 3D point in the camera frame.

    The returned z component equals `depth` exactly.
    """
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = float(uv[0]), float(uv[1])
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )


def backproject_many(us, vs, depths, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized backprojection; returns (n, 3) points in the camera frame."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    return np.stack(
        [
            (us - intrinsics.cx) / intrinsics.fx * depths,
            (vs - intrinsics.cy) / intrinsics.fy * depths,
            depths,
        ],
        axis=-1,
    )


def project_mean(p, intrinsics: CameraIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """Project one camera-frame point to pixel coordinates.

    The result may lie outside image bounds; callers filter.
    """
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= z_min:
        raise BehindCamera(f"point z={p[2]} is at or behind the near plane {z_min}")
    return np.array(
        [
            intrinsics.fx * p[0] / p[2] + intrinsics.cx,
            intrinsics.fy * p[1] / p[2] + intrinsics.cy,
        ]
    )


def project_many(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized pinhole projection of (n, 3) points; no near-plane check."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack(
        [
            intrinsics.fx * points[..., 0] / z + intrinsics.cx,
            intrinsics.fy * points[..., 1] / z + intrinsics.cy,
        ],
        axis=-1,
    )


def projection_jacobian(p, intrinsics: CameraIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """2x3 Jacobian of project_mean at p."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p
    if z <= z_min:
        raise BehindCamera(f"point z={z} is at or behind the near plane {z_min}")
    fx, fy = intrinsics.fx, intrinsics.fy
    return np.array(
        [
            [fx / z, 0.0, -fx * x / z**2],
            [0.0, fy / z, -fy * y / z**2],
        ]
    )


def projection_jacobian_many(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized Jacobians for (n, 3) points; returns (n, 2, 3)."""
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    fx, fy = intrinsics.fx, intrinsics.fy
    zero = np.zeros_like(z)
    row0 = np.stack([fx / z, zero, -fx * x / z**2], axis=-1)
    row1 = np.stack([zero, fy / z, -fy * y / z**2], axis=-1)
    return np.stack([row0, row1], axis=-2)


def transform_gaussian(g: Gaussian3, t: RelativeTransform) -> Gaussian3:
    """Rigidly move a Gaussian; weight and disagreement are untouched."""
    mean = t.rotation @ g.mean + t.translation
    cov = t.rotation @ g.cov @ t.rotation.T
    return Gaussian3(mean, cov, g.weight, g.m, m_count=g.m_count)


def transform_gaussians_arrays(means, covs, t: RelativeTransform):
    """Rigid transform of stacked means (n, 3) and covariances (n, 3, 3)."""
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    r = t.rotation
    return means @ r.T + t.translation, np.einsum("ij,njk,lk->nil", r, covs, r)


def project_gaussian(
    g: Gaussian3,
    intrinsics: CameraIntrinsics,
    source_index: int = -1,
    z_min: float = Z_MIN,
) -> Gaussian2:
    """Linearized projection of a camera-frame Gaussian onto the image plane."""
    mean2 = project_mean(g.mean, intrinsics, z_min=z_min)
    a = projection_jacobian(g.mean, intrinsics, z_min=z_min)
    cov2 = a @ g.cov @ a.T
    cov2 = 0.5 * (cov2 + cov2.T)  # absorb floating-point asymmetry
    return Gaussian2(mean2, cov2, source_index=source_index)
