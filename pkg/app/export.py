from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import ConfigurationError, StrataError
from .merging import InstanceMap
from .models import InstanceSummary, MapExport, Provenance, RunConfig
from .sequence import ground_truth_instances

LOGGER = logging.getLogger(__name__)

UNASSIGNED_COLOR = (128, 128, 128)
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
        (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
        (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
        (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (255, 255, 255),
    ],
    dtype=np.uint8,
)
VERTEX_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


def summarize(instance_map: InstanceMap, config: RunConfig, weights_path: str | None = None) -> MapExport:
    instances = [
        InstanceSummary(
            instance_id=record.instance_id,
            n=record.n,
            box=[float(v) for v in record.box],
            semantic_argmax=int(np.argmax(record.semantic)),
            confidence=float(record.confidence),
            point_count=int(record.point_ids.size),
            point_ids=record.point_ids.tolist(),
        )
        for record in sorted(instance_map.records, key=lambda r: r.instance_id)
    ]
    return MapExport(
        provenance=Provenance(config=config.model_dump(mode="json"), overrides=config.overrides(), weights=weights_path),
        frames=instance_map.frames,
        point_count=instance_map.point_count,
        instances=instances,
    )


def export_json(model: BaseModel, path: str | Path) -> None:
    try:
        Path(path).write_text(model.model_dump_json(indent=2) + "\n")
    except OSError as exc:
        raise StrataError(f"cannot write {path}: {exc}") from exc


def point_colors(labels: np.ndarray) -> np.ndarray:
    colors = np.tile(np.array(UNASSIGNED_COLOR, dtype=np.uint8), (labels.shape[0], 1))
    assigned = labels >= 0
    colors[assigned] = PALETTE[labels[assigned] % len(PALETTE)]
    return colors


def export_ply(
    instance_map: InstanceMap,
    positions: np.ndarray,
    path: str | Path,
    encoding: Literal["binary", "ascii"] = "binary",
) -> None:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if positions.shape[0] != instance_map.point_count:
        raise ConfigurationError(f"{positions.shape[0]} positions for a map of {instance_map.point_count} points")
    colors = point_colors(instance_map.point_labels())
    vertices = np.empty(positions.shape[0], dtype=VERTEX_DTYPE)
    for axis, name in enumerate("xyz"):
        vertices[name] = positions[:, axis]
    for channel, name in enumerate(("red", "green", "blue")):
        vertices[name] = colors[:, channel]

    fmt = "binary_little_endian" if encoding == "binary" else "ascii"
    header = "\n".join(
        [
            "ply",
            f"format {fmt} 1.0",
            f"element vertex {positions.shape[0]}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
        ]
    ) + "\n"
    try:
        with open(path, "wb") as handle:
            handle.write(header.encode("ascii"))
            if encoding == "binary":
                handle.write(vertices.tobytes())
            else:
                for v in vertices:
                    handle.write(
                        f"{float(v['x'])!r} {float(v['y'])!r} {float(v['z'])!r} {int(v['red'])} {int(v['green'])} {int(v['blue'])}\n".encode("ascii")
                    )
    except OSError as exc:
        raise StrataError(f"cannot write {path}: {exc}") from exc
    LOGGER.info("wrote %d vertices to %s", positions.shape[0], path)


def load_map_export(path: str | Path) -> MapExport:
    try:
        return MapExport.model_validate_json(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigurationError(f"{path} is not a map export: {exc}") from exc


def load_predictions(path: str | Path) -> list[tuple[np.ndarray, float]]:
    export = load_map_export(path)
    return [(np.asarray(item.point_ids, dtype=np.int64), item.confidence) for item in export.instances]


def load_ground_truth(path: str | Path) -> list[np.ndarray]:
    """Ground truth from a sequence directory (meta files) or from a map export JSON."""
    path = Path(path)
    if path.is_dir():
        return ground_truth_instances(path)
    if path.suffix == ".json":
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read ground truth {path}: {exc}") from exc
        if isinstance(payload, dict) and "instances" in payload:
            return [np.asarray(item["point_ids"], dtype=np.int64) for item in payload["instances"]]
        if isinstance(payload, list):
            return [np.asarray(ids, dtype=np.int64) for ids in payload]
    raise ConfigurationError(f"{path} is neither a sequence directory nor a ground-truth JSON file")
