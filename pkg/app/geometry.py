"""Pinhole camera model, depth unprojection and axis-aligned boxes.

Image arrays are indexed ``[v, u]`` (row, column); poses map camera
coordinates to world coordinates. Camera axes: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyInputError
from .models import CameraIntrinsics

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ConfigurationError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ConfigurationError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ConfigurationError("rotation must have determinant 1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Pose:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ConfigurationError(f"pose matrix must be 4x4, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ConfigurationError("viewing direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        return cls(np.column_stack([right, down, forward]), eye)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> Pose:
        rotation = self.rotation.T
        return Pose(rotation, -rotation @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class DepthImage:
    data: np.ndarray
    depth_scale: float = 0.001

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ConfigurationError(f"depth image must be 2-D, got shape {data.shape}")
        if self.depth_scale <= 0:
            raise ConfigurationError("depth_scale must be positive")
        object.__setattr__(self, "data", data.astype(np.uint16, copy=False))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    source_pixel: np.ndarray
    frame_id: int
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ConfigurationError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> Aabb:
        vector = np.asarray(vector, dtype=np.float64).reshape(6)
        return cls(vector[:3], vector[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.min, self.max])

    def volume(self) -> float:
        return float(np.prod(self.max - self.min))


def unproject_depth(depth: DepthImage, intrinsics: CameraIntrinsics, pose: Pose, frame_id: int = 0) -> PointCloud:
    if (depth.height, depth.width) != (intrinsics.height, intrinsics.width):
        raise ConfigurationError(
            f"depth image is {depth.width}x{depth.height}, intrinsics expect {intrinsics.width}x{intrinsics.height}"
        )
    v, u = np.nonzero(depth.data)
    z = depth.data[v, u].astype(np.float64) * depth.depth_scale
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    positions = pose.apply(np.stack([x, y, z], axis=1))
    return PointCloud(
        positions=positions,
        source_pixel=np.stack([u, v], axis=1).astype(np.int64),
        frame_id=frame_id,
        image_shape=(depth.height, depth.width),
    )


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World points to pixel coordinates ``(u, v)`` and camera depth ``z``."""
    cam = pose.inverse().apply(points)
    z = cam[:, 2]
    u = cam[:, 0] * intrinsics.fx / z + intrinsics.cx
    v = cam[:, 1] * intrinsics.fy / z + intrinsics.cy
    return np.stack([u, v], axis=1), z


def aabb_of_points(points: Iterable[Sequence[float]] | np.ndarray) -> Aabb:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyInputError("cannot bound an empty point set")
    return Aabb(points.min(axis=0), points.max(axis=0))


def as_box_array(boxes: Sequence[Aabb] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 6).astype(np.float64, copy=False)
    if len(boxes) == 0:
        return np.zeros((0, 6))
    return np.stack([box.as_vector() for box in boxes])


def aabb_iou_matrix(a: Sequence[Aabb] | np.ndarray, b: Sequence[Aabb] | np.ndarray) -> np.ndarray:
    a = as_box_array(a)
    b = as_box_array(b)
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
    vol_a = (a[:, 3:] - a[:, :3]).prod(axis=-1)
    vol_b = (b[:, 3:] - b[:, :3]).prod(axis=-1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    # zero-volume union: flat or point boxes only match their exact copy
    degenerate = union <= 0
    if np.any(degenerate):
        identical = np.all(a[:, None, :] == b[None, :, :], axis=-1)
        iou[degenerate & identical] = 1.0
    return np.clip(iou, 0.0, 1.0)
