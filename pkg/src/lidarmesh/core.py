"""Shared geometric primitives: vectors, rigid poses, pinhole cameras, images.

Conventions used throughout the package:

* 3-vectors are float64 numpy arrays of shape (3,); point sets are (N, 3).
* Camera frame: +z forward, +x right, +y down. Pixel origin is the top-left
  corner, u grows right, v grows down.
* Camera poses are camera-to-world transforms.
* Images are row-major numpy arrays of shape (height, width, channels),
  uint8 for sensor input, float for working buffers.

All core values are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "vec3",
    "RigidPose",
    "ImageBuffer",
    "CameraFrame",
    "DegenerateProjectionError",
    "project",
    "project_points",
    "unproject",
    "triangle_area_px",
]


class DegenerateProjectionError(ValueError):
    """A face vertex does not project into the image."""


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Build a finite float64 3-vector."""
    v = np.array([x, y, z], dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("vector components must be finite")
    return v


def _check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ValueError("rotation must be orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation must have determinant +1")


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        if not np.isfinite(t).all():
            raise ValueError("translation must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quaternion(qx: float, qy: float, qz: float, qw: float,
                        translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        """Pose from a unit quaternion (x, y, z, w order)."""
        n = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if n < 1e-12:
            raise ValueError("zero quaternion")
        x, y, z, w = qx / n, qy / n, qz / n, qw / n
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return RigidPose(r, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return self.compose(other)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major image, shape (height, width, channels); 1 channel for label
    images, 3 for color."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError("image must be (h, w, 1) or (h, w, 3)")
        d = np.ascontiguousarray(d)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CameraFrame:
    """Pinhole camera: intrinsics, camera-to-world pose and image payload.

    Input images are assumed rectified; no lens distortion model.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidPose
    image: ImageBuffer
    frame_id: int = 0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image.width and 0 <= self.cy < self.image.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.pose.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.pose.translation) @ self.pose.rotation


def project(camera: CameraFrame, point: np.ndarray):
    """Project a world point; returns (u, v) or None when the point is behind
    the camera or outside the image rectangle."""
    uv, ok = project_points(camera, np.asarray(point, dtype=np.float64)[None, :])
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def project_points(camera: CameraFrame, points: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (uv, valid): uv is (N, 2) pixel coordinates (garbage where
    invalid), valid the boolean in-front-and-inside mask.
    """
    pc = camera.world_to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    valid = (
        (z > 0)
        & (u >= 0) & (u < camera.image.width)
        & (v >= 0) & (v < camera.image.height)
    )
    uv = np.stack([u, v], axis=1)
    uv[~valid] = 0.0
    return uv, valid


def unproject(camera: CameraFrame, u: float, v: float, depth: float) -> np.ndarray:
    """World point at pixel (u, v) and camera-frame depth z = depth."""
    x = (u - camera.cx) / camera.fx * depth
    y = (v - camera.cy) / camera.fy * depth
    return camera.pose.apply(np.array([x, y, depth]))


def triangle_area_px(camera: CameraFrame, vertices: np.ndarray) -> float:
    """Area in pixels² of a face projected into the image (shoelace formula).

    Raises DegenerateProjectionError when any of the three vertices fails to
    project.
    """
    verts = np.asarray(vertices, dtype=np.float64).reshape(3, 3)
    uv, ok = project_points(camera, verts)
    if not ok.all():
        raise DegenerateProjectionError("face vertex outside the view frustum")
    a, b, c = uv
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    return abs(cross) / 2.0
