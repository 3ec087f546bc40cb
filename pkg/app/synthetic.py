"""Procedural rooms with exact ground truth.

Objects are axis-aligned boxes and spheres resting on the floor (z = 0). Frames
are rendered by analytic ray casting, so depth, masks and instance identity
are exact up to the 16-bit depth quantization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import CapacityError, ConfigurationError
from .geometry import DepthImage, Pose, unproject_depth
from .models import CameraIntrinsics
from .sequence import Frame, FrameMeta, write_frame, write_intrinsics
from .superpoint import MaskImage, lift_masks

LOGGER = logging.getLogger(__name__)

ROOM_SIZE = 4.0
ROOM_HEIGHT = 2.5
PLACEMENT_MARGIN = 0.05
MAX_DEPTH_UNITS = 65535


@dataclass(frozen=True)
class SceneObject:
    shape: Literal["box", "sphere"]
    center: np.ndarray
    half_extents: np.ndarray
    instance_id: int
    category: int

    @property
    def radius(self) -> float:
        return float(self.half_extents[0])

    def aabb(self) -> np.ndarray:
        return np.concatenate([self.center - self.half_extents, self.center + self.half_extents])

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the object's surface."""
        if self.shape == "sphere":
            return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius)
        q = np.abs(points - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    room_min: np.ndarray
    room_max: np.ndarray
    seed: int
    num_classes: int

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([obj.center for obj in self.objects], axis=0)


@dataclass(frozen=True)
class SyntheticFrame:
    index: int
    depth: DepthImage
    pose: Pose
    intrinsics: CameraIntrinsics
    mask: MaskImage
    instance_ids: np.ndarray
    categories: np.ndarray
    gt_boxes: np.ndarray


@dataclass(frozen=True)
class OracleFeatures:
    boxes: np.ndarray
    contrastive: np.ndarray
    semantic: np.ndarray
    point_features: np.ndarray


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    focal = 100.0 * width / 160.0
    return CameraIntrinsics(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def _overlaps(box: np.ndarray, placed: list[np.ndarray]) -> bool:
    for other in placed:
        if np.all(box[:3] - PLACEMENT_MARGIN < other[3:]) and np.all(other[:3] < box[3:] + PLACEMENT_MARGIN):
            return True
    return False


def generate_scene(
    seed: int,
    n_objects: int,
    num_classes: int = 20,
    room_size: float = ROOM_SIZE,
    max_retries: int = 2000,
) -> SyntheticScene:
    if n_objects < 1:
        raise ConfigurationError("a scene needs at least one object")
    rng = np.random.default_rng(seed)
    half_room = room_size / 2.0
    room_min = np.array([-half_room, -half_room, 0.0])
    room_max = np.array([half_room, half_room, ROOM_HEIGHT])

    objects: list[SceneObject] = []
    boxes: list[np.ndarray] = []
    retries = 0
    while len(objects) < n_objects:
        shape = "box" if rng.random() < 0.5 else "sphere"
        if shape == "box":
            half = rng.uniform(0.12, 0.4, size=3)
        else:
            half = np.full(3, rng.uniform(0.12, 0.35))
        xy = rng.uniform(room_min[:2] + half[:2], room_max[:2] - half[:2])
        center = np.array([xy[0], xy[1], half[2]])
        box = np.concatenate([center - half, center + half])
        if _overlaps(box, boxes):
            retries += 1
            if retries > max_retries:
                raise CapacityError(len(objects), n_objects, retries)
            continue
        objects.append(SceneObject(shape, center, half, len(objects), int(rng.integers(num_classes))))
        boxes.append(box)
    LOGGER.debug("placed %d objects for seed %d after %d retries", n_objects, seed, retries)
    return SyntheticScene(tuple(objects), room_min, room_max, seed, num_classes)


def orbit_trajectory(
    scene: SyntheticScene,
    n_frames: int,
    radius: float | None = None,
    height: float = 2.2,
) -> list[Pose]:
    if n_frames < 1:
        raise ConfigurationError("need at least one frame")
    target = scene.centroid
    radius = radius if radius is not None else 1.1 * float(np.max(scene.room_max[:2] - scene.room_min[:2]))
    poses = []
    for i in range(n_frames):
        angle = 2.0 * math.pi * i / n_frames
        eye = target + np.array([radius * math.cos(angle), radius * math.sin(angle), 0.0])
        eye[2] = height
        poses.append(Pose.look_at(eye, target))
    return poses


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    zero = dirs == 0.0
    safe = np.where(zero, 1.0, dirs)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    inside = (origin >= lo) & (origin <= hi)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    return np.where((t_near <= t_far) & (t_near > 0.0), t_near, np.inf)


def _ray_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - root) / (2.0 * a)
    return np.where((disc >= 0.0) & (t > 0.0), t, np.inf)


def render_frame(
    scene: SyntheticScene,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    depth_scale: float = 0.001,
    index: int = 0,
) -> SyntheticFrame:
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    # unit z component, so the ray parameter is the camera depth
    dirs_cam = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u, dtype=np.float64)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    nearest = np.full(dirs.shape[0], np.inf)
    owner = np.full(dirs.shape[0], -1, dtype=np.int64)
    for obj in scene.objects:
        if obj.shape == "box":
            t = _ray_box(origin, dirs, obj.center - obj.half_extents, obj.center + obj.half_extents)
        else:
            t = _ray_sphere(origin, dirs, obj.center, obj.radius)
        closer = t < nearest
        nearest[closer] = t[closer]
        owner[closer] = obj.instance_id

    units = np.rint(np.where(np.isfinite(nearest), nearest, 0.0) / depth_scale)
    valid = np.isfinite(nearest) & (units >= 1) & (units <= MAX_DEPTH_UNITS)
    depth = np.where(valid, units, 0).astype(np.uint16).reshape(intrinsics.height, intrinsics.width)
    ids = np.where(valid, owner, -1).reshape(intrinsics.height, intrinsics.width)

    visible = np.unique(ids[ids >= 0])
    labels = np.full(ids.shape, -1, dtype=np.int64)
    labels[ids >= 0] = np.searchsorted(visible, ids[ids >= 0])
    by_id = {obj.instance_id: obj for obj in scene.objects}
    return SyntheticFrame(
        index=index,
        depth=DepthImage(depth, depth_scale),
        pose=pose,
        intrinsics=intrinsics,
        mask=MaskImage(labels),
        instance_ids=visible.astype(np.int64),
        categories=np.array([by_id[i].category for i in visible], dtype=np.int64),
        gt_boxes=np.array([by_id[i].aabb() for i in visible]).reshape(-1, 6),
    )


def instance_signature(instance_id: int, dims: int, seed: int, stream: int = 0) -> np.ndarray:
    vector = np.random.default_rng([seed, instance_id, stream]).normal(size=dims)
    return vector / np.linalg.norm(vector)


def oracle_features(
    frame: SyntheticFrame,
    scene: SyntheticScene,
    noise_level: float,
    channels: int = 32,
    contrastive_dim: int | None = None,
) -> OracleFeatures:
    """Stand-ins for trained backbone and head outputs, identity-consistent across frames."""
    if noise_level < 0:
        raise ConfigurationError("noise level must be non-negative")
    contrastive_dim = contrastive_dim or channels
    rng = np.random.default_rng([scene.seed, frame.index, 1])
    count = frame.instance_ids.shape[0]
    k = scene.num_classes

    boxes = frame.gt_boxes + rng.uniform(-noise_level, noise_level, size=(count, 6))
    boxes = np.concatenate([np.minimum(boxes[:, :3], boxes[:, 3:]), np.maximum(boxes[:, :3], boxes[:, 3:])], axis=1)

    contrastive = np.array([instance_signature(i, contrastive_dim, scene.seed, 1) for i in frame.instance_ids]).reshape(count, contrastive_dim)
    contrastive = contrastive + rng.uniform(-noise_level, noise_level, size=contrastive.shape)
    contrastive /= np.maximum(np.linalg.norm(contrastive, axis=1, keepdims=True), 1e-12)

    blend = min(noise_level, 1.0)
    semantic = np.full((count, k), blend / k)
    semantic[np.arange(count), frame.categories] += 1.0 - blend

    cloud = unproject_depth(frame.depth, frame.intrinsics, frame.pose, frame.index)
    labels = lift_masks(frame.mask, cloud)
    signatures = np.zeros((count + 1, channels))
    for row, instance_id in enumerate(frame.instance_ids):
        signatures[row] = instance_signature(int(instance_id), channels, scene.seed, 0)
    point_features = signatures[np.where(labels >= 0, labels, count)]
    point_features = point_features + rng.uniform(-noise_level, noise_level, size=point_features.shape)
    return OracleFeatures(boxes, contrastive, semantic, point_features.astype(np.float32))


def to_frame(frame: SyntheticFrame, features: OracleFeatures | None = None) -> Frame:
    meta = FrameMeta(
        semantics=features.semantic if features is not None else None,
        instance_ids=frame.instance_ids,
        categories=frame.categories,
        boxes=features.boxes if features is not None else None,
        contrastive=features.contrastive if features is not None else None,
    )
    return Frame(
        index=frame.index,
        depth=frame.depth,
        pose=frame.pose,
        intrinsics=frame.intrinsics,
        mask=frame.mask,
        features=features.point_features if features is not None else None,
        meta=meta,
    )


def synthesize_sequence(
    directory: str | Path,
    seed: int,
    n_objects: int,
    n_frames: int,
    noise_level: float = 0.0,
    channels: int = 32,
    num_classes: int = 20,
    intrinsics: CameraIntrinsics | None = None,
    depth_scale: float = 0.001,
) -> SyntheticScene:
    intrinsics = intrinsics or default_intrinsics()
    scene = generate_scene(seed, n_objects, num_classes)
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_intrinsics(root, intrinsics, depth_scale)
    for index, pose in enumerate(orbit_trajectory(scene, n_frames)):
        rendered = render_frame(scene, pose, intrinsics, depth_scale, index)
        write_frame(root, to_frame(rendered, oracle_features(rendered, scene, noise_level, channels)))
    LOGGER.info("wrote %d synthetic frames of %d objects to %s", n_frames, n_objects, root)
    return scene
