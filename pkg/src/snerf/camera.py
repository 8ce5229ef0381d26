"""Pinhole cameras and rigid camera-to-world poses.

Convention: camera-to-world 4x4 matrices, right-handed, the camera looks
along its local -z axis with +y up (the usual NeRF interchange format).
Pixel (u, v) has v growing downwards, so image rows map to -y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"degenerate intrinsics: focal lengths must be > 0 (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @classmethod
    def default(cls, width: int, height: int | None = None) -> "CameraIntrinsics":
        """Focal length 1.2 * width, principal point at the image center."""
        height = width if height is None else height
        f = 1.2 * width
        return cls(width, height, f, f, width / 2.0, height / 2.0)

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))


@dataclass(frozen=True, eq=False)
class CameraPose:
    transform: np.ndarray

    def __post_init__(self):
        m = np.array(self.transform, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got shape {m.shape}")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(rot) <= 0:
            raise ValueError("rotation block has negative determinant")
        if np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-12:
            raise ValueError("last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "transform", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.transform[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.transform[:3, 2]

    def __eq__(self, other):
        return isinstance(other, CameraPose) and np.array_equal(self.transform, other.transform)

    def __hash__(self):
        return hash(self.transform.tobytes())


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll_deg: float = 0.0) -> CameraPose:
    """Pose at `eye` whose optical axis passes through `target`.

    `up` is only a hint; when it is (nearly) parallel to the viewing
    direction another world axis is used. `roll_deg` rotates the camera
    about its optical axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    if dist == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / dist
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up / np.linalg.norm(up), fwd)) > 0.99:
        axes = np.eye(3)
        up = axes[np.argmin(np.abs(axes @ fwd))]
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    if roll_deg:
        a = math.radians(roll_deg)
        right, cam_up = (math.cos(a) * right + math.sin(a) * cam_up,
                         -math.sin(a) * right + math.cos(a) * cam_up)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = cam_up
    m[:3, 2] = -fwd
    m[:3, 3] = eye
    return CameraPose(m)


def camera_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame directions through every pixel center, (H, W, 3)."""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack(
        [(uu - intr.cx) / intr.fx, -(vv - intr.cy) / intr.fy, -np.ones_like(uu)], axis=-1
    )


def pixel_rays(pose: CameraPose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and unit directions, each (H, W, 3)."""
    d = camera_directions(intr) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.position, d.shape).copy()
    return o, d
