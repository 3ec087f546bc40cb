"""On-disk RGB-D sequence layout.

A sequence directory holds ``intrinsics.txt`` plus, per frame index ``i``,
``depth_{i:05d}.png`` and ``mask_{i:05d}.png`` (16-bit, mask value 65535 means
unmasked), ``pose_{i:05d}.txt`` (4x4 camera-to-world) and optionally
``feat_{i:05d}.bin`` and ``meta_{i:05d}.json``.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from .errors import ConfigurationError, SequenceFormatError, SequenceGapError
from .geometry import DepthImage, Pose, unproject_depth
from .models import CameraIntrinsics
from .superpoint import MaskImage, lift_masks

LOGGER = logging.getLogger(__name__)

UNMASKED_VALUE = 65535
DEPTH_NAME = re.compile(r"depth_(\d{5})\.png")
TOKEN = re.compile(rb"\S+")
FEATURE_HEADER = np.dtype("<u4")
FEATURE_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class FrameMeta:
    semantics: np.ndarray | None = None
    instance_ids: np.ndarray | None = None
    categories: np.ndarray | None = None
    boxes: np.ndarray | None = None
    contrastive: np.ndarray | None = None


@dataclass(frozen=True)
class Frame:
    index: int
    depth: DepthImage
    pose: Pose
    intrinsics: CameraIntrinsics
    mask: MaskImage
    features: np.ndarray | None = None
    meta: FrameMeta | None = None


def frame_path(root: Path, stem: str, index: int, suffix: str) -> Path:
    return root / f"{stem}_{index:05d}.{suffix}"


def _numbers(path: Path, expected: int) -> list[float]:
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise SequenceFormatError(path, 0, "file is missing") from exc
    values = []
    for match in TOKEN.finditer(data):
        try:
            values.append(float(match.group()))
        except ValueError as exc:
            raise SequenceFormatError(path, match.start(), f"not a number: {match.group()!r}") from exc
        if len(values) > expected:
            raise SequenceFormatError(path, match.start(), f"expected {expected} numbers")
    if len(values) < expected:
        raise SequenceFormatError(path, len(data), f"expected {expected} numbers, found {len(values)}")
    return values


def read_intrinsics(root: Path) -> tuple[CameraIntrinsics, float]:
    path = root / "intrinsics.txt"
    fx, fy, cx, cy, width, height, depth_scale = _numbers(path, 7)
    if width != int(width) or height != int(height):
        raise SequenceFormatError(path, 0, "image size must be integral")
    if depth_scale <= 0:
        raise ConfigurationError(f"{path}: depth scale must be positive")
    try:
        intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height))
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return intrinsics, depth_scale


def read_pose(path: Path) -> Pose:
    return Pose.from_matrix(np.array(_numbers(path, 16)).reshape(4, 4))


def _read_png(path: Path, intrinsics: CameraIntrinsics) -> np.ndarray:
    try:
        with Image.open(path) as image:
            array = np.array(image)
    except FileNotFoundError as exc:
        raise SequenceFormatError(path, 0, "file is missing") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise SequenceFormatError(path, 0, f"unreadable image: {exc}") from exc
    if array.ndim != 2:
        raise SequenceFormatError(path, 0, "expected a single-channel 16-bit image")
    if array.shape != (intrinsics.height, intrinsics.width):
        raise ConfigurationError(f"{path}: image is {array.shape}, intrinsics say {(intrinsics.height, intrinsics.width)}")
    return array.astype(np.int64)


def _read_features(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 2 * FEATURE_HEADER.itemsize:
        raise SequenceFormatError(path, len(data), "truncated feature header")
    n, c = (int(v) for v in np.frombuffer(data, dtype=FEATURE_HEADER, count=2))
    offset = 2 * FEATURE_HEADER.itemsize
    expected = offset + n * c * FEATURE_DTYPE.itemsize
    if len(data) != expected:
        raise SequenceFormatError(path, min(len(data), expected), f"header declares {n}x{c} floats, file holds {len(data) - offset} bytes")
    return np.frombuffer(data, dtype=FEATURE_DTYPE, offset=offset).reshape(n, c).copy()


def _read_meta(path: Path) -> FrameMeta:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(path, exc.pos, exc.msg) from exc

    def array(key: str, dtype: Any) -> np.ndarray | None:
        value = payload.get(key)
        return None if value is None else np.asarray(value, dtype=dtype)

    def table(key: str) -> np.ndarray | None:
        value = array(key, np.float64)
        if value is None or value.size == 0:
            return None
        return value.reshape(len(payload[key]), -1)

    try:
        return FrameMeta(
            semantics=table("semantics"),
            instance_ids=array("instance_ids", np.int64),
            categories=array("categories", np.int64),
            boxes=table("boxes"),
            contrastive=table("contrastive"),
        )
    except (TypeError, ValueError) as exc:
        raise SequenceFormatError(path, 0, f"malformed meta: {exc}") from exc


def read_frame(root: Path, index: int, intrinsics: CameraIntrinsics, depth_scale: float) -> Frame:
    depth = _read_png(frame_path(root, "depth", index, "png"), intrinsics)
    labels = _read_png(frame_path(root, "mask", index, "png"), intrinsics)
    labels[labels == UNMASKED_VALUE] = -1
    feat = frame_path(root, "feat", index, "bin")
    meta = frame_path(root, "meta", index, "json")
    frame = Frame(
        index=index,
        depth=DepthImage(depth.astype(np.uint16), depth_scale),
        pose=read_pose(frame_path(root, "pose", index, "txt")),
        intrinsics=intrinsics,
        mask=MaskImage(labels),
        features=_read_features(feat) if feat.exists() else None,
        meta=_read_meta(meta) if meta.exists() else None,
    )
    valid = int(np.count_nonzero(frame.depth.data))
    if frame.features is not None and frame.features.shape[0] != valid:
        raise ConfigurationError(f"{feat}: {frame.features.shape[0]} feature rows for {valid} valid depth pixels")
    return frame


def frame_indices(root: Path) -> list[int]:
    indices = sorted(int(m.group(1)) for p in root.glob("depth_*.png") if (m := DEPTH_NAME.fullmatch(p.name)))
    for expected, actual in enumerate(indices):
        if actual != expected:
            raise SequenceGapError(expected)
    return indices


def read_sequence(directory: str | Path) -> Iterator[Frame]:
    root = Path(directory)
    if not root.is_dir():
        raise ConfigurationError(f"sequence directory {root} does not exist")
    indices = frame_indices(root)
    if not indices:
        LOGGER.info("sequence %s holds no frames", root)
        return
    intrinsics, depth_scale = read_intrinsics(root)
    for index in indices:
        yield read_frame(root, index, intrinsics, depth_scale)


def write_intrinsics(root: Path, intrinsics: CameraIntrinsics, depth_scale: float) -> None:
    values = [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy, intrinsics.width, intrinsics.height, depth_scale]
    (root / "intrinsics.txt").write_text(" ".join(repr(v) for v in values) + "\n")


def write_frame(root: Path, frame: Frame) -> None:
    labels = frame.mask.labels
    if labels.max(initial=-1) >= UNMASKED_VALUE:
        raise ConfigurationError(f"mask ids must stay below {UNMASKED_VALUE}")
    Image.fromarray(frame.depth.data.astype(np.uint16)).save(frame_path(root, "depth", frame.index, "png"))
    Image.fromarray(np.where(labels < 0, UNMASKED_VALUE, labels).astype(np.uint16)).save(
        frame_path(root, "mask", frame.index, "png")
    )
    rows = [" ".join(repr(float(v)) for v in row) for row in frame.pose.matrix()]
    frame_path(root, "pose", frame.index, "txt").write_text("\n".join(rows) + "\n")

    if frame.features is not None:
        features = np.asarray(frame.features, dtype=FEATURE_DTYPE)
        header = np.array(features.shape, dtype=FEATURE_HEADER).tobytes()
        frame_path(root, "feat", frame.index, "bin").write_bytes(header + features.tobytes())
    if frame.meta is not None:
        payload = {
            key: None if value is None else value.tolist()
            for key, value in (
                ("semantics", frame.meta.semantics),
                ("instance_ids", frame.meta.instance_ids),
                ("categories", frame.meta.categories),
                ("boxes", frame.meta.boxes),
                ("contrastive", frame.meta.contrastive),
            )
        }
        frame_path(root, "meta", frame.index, "json").write_text(json.dumps(payload))


_DONE = object()


def prefetch(frames: Iterable[Frame], depth: int) -> Iterator[Frame]:
    """Read ahead up to ``depth`` frames on a worker thread; order is preserved."""
    if depth <= 0:
        yield from frames
        return
    buffer: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item: Any) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for frame in frames:
                if not offer((frame, None)):
                    return
        except Exception as exc:
            offer((None, exc))
            return
        offer((_DONE, None))

    worker = threading.Thread(target=produce, name="frame-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item, error = buffer.get()
            if error is not None:
                raise error
            if item is _DONE:
                return
            yield item
    finally:
        stop.set()


def ground_truth_instances(directory: str | Path) -> list[np.ndarray]:
    """Global point ids per ground-truth instance, in the order a streaming run numbers points."""
    members: dict[int, list[np.ndarray]] = {}
    offset = 0
    for frame in read_sequence(directory):
        if frame.meta is None or frame.meta.instance_ids is None:
            raise ConfigurationError(f"frame {frame.index} carries no ground-truth instance ids")
        cloud = unproject_depth(frame.depth, frame.intrinsics, frame.pose, frame.index)
        labels = lift_masks(frame.mask, cloud)
        for label, instance_id in enumerate(frame.meta.instance_ids):
            rows = np.flatnonzero(labels == label)
            if rows.size:
                members.setdefault(int(instance_id), []).append(rows + offset)
        offset += len(cloud)
    return [np.concatenate(members[key]) for key in sorted(members)]
