"""Poses, camera model and pinhole projection helpers.

Conventions: world frame is x east, y north, z up. Yaw 0 looks along +x and
grows counter-clockwise. The camera frame is x right, y down, z forward,
so a pixel (u, v) maps to the camera-frame direction ((u+0.5-cx)/fx,
(v+0.5-cy)/fy, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


def angle_diff(a: float, b: float) -> float:
    """Absolute yaw difference wrapped to [0, pi]."""
    return abs(wrap_angle(a - b))


@dataclass(frozen=True, eq=False)
class Pose:
    """Agent pose: 3-vector position in meters plus yaw in [-pi, pi)."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"non-finite pose position {pos}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def at(cls, x: float, y: float, yaw: float = 0.0) -> "Pose":
        return cls(np.array([x, y, 0.0]), yaw)

    @property
    def xy(self) -> np.ndarray:
        return self.position[:2]

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.position - other.position))

    def angle_to(self, other: "Pose") -> float:
        return angle_diff(self.yaw, other.yaw)

    def close_to(self, other: "Pose", tol: float = 1e-9) -> bool:
        return self.distance_to(other) <= tol and self.angle_to(other) <= tol

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.position[0]), float(self.position[1]),
                float(self.position[2]), float(self.yaw))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole RGB-D camera: mounted height, fixed downward tilt, horizontal FOV."""

    height_m: float = 1.5
    tilt_deg: float = -30.0
    hfov_deg: float = 120.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not 0.0 < self.hfov_deg < 180.0:
            raise ValueError(f"hfov must be in (0, 180), got {self.hfov_deg}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def fx(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def fy(self) -> float:
        return self.fx

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def camera_origin(self, pose: Pose) -> np.ndarray:
        """Optical center in world coordinates."""
        o = pose.position.copy()
        o[2] += self.height_m
        return o

    def rotation(self, pose: Pose) -> np.ndarray:
        """3x3 camera-to-world rotation (columns: right, down, forward)."""
        yaw = pose.yaw
        tilt = math.radians(self.tilt_deg)
        forward = np.array([
            math.cos(yaw) * math.cos(tilt),
            math.sin(yaw) * math.cos(tilt),
            math.sin(tilt),
        ])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(forward, right)
        return np.column_stack([right, down, forward])

    def pixel_dirs_cam(self) -> np.ndarray:
        """(H, W, 3) per-pixel unnormalized camera-frame directions, z = 1."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        a, b = np.meshgrid(u, v)
        return np.stack([a, b, np.ones_like(a)], axis=-1)

    def pixel_dirs_world(self, pose: Pose) -> np.ndarray:
        """(H, W, 3) per-pixel ray directions in world frame (unnormalized, so
        that the ray parameter t equals depth along the optical axis)."""
        return self.pixel_dirs_cam() @ self.rotation(pose).T

    def project(self, points: np.ndarray, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project (N, 3) world points. Returns (u, v, z) with z the depth along
        the optical axis; u/v are float pixel coordinates."""
        pts = np.atleast_2d(points) - self.camera_origin(pose)
        cam = pts @ self.rotation(pose)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam[:, 0] / z * self.fx + self.cx
            v = cam[:, 1] / z * self.fy + self.cy
        return u, v, z


@dataclass
class Detection:
    """Ground-truth detection of a scene object within the current view."""

    object_id: str
    category: str
    attribute: str
    description: str
    bbox: tuple[int, int, int, int]  # (u_min, v_min, u_max, v_max), inclusive
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    room: str = ""

    def text(self) -> str:
        return (f"cate: {self.category} | attr: {self.attribute} | "
                f"desc: {self.description}")


COMPASS_8 = ["east", "northeast", "north", "northwest",
             "west", "southwest", "south", "southeast"]


def compass_label(dx: float, dy: float) -> str:
    """8-way compass name for an offset vector."""
    ang = math.atan2(dy, dx)
    sector = int(round(ang / (math.pi / 4.0))) % 8
    return COMPASS_8[sector]
