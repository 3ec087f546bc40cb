from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .decoder import decode, init_queries, mask_nms, passthrough_masks
from .errors import ConfigurationError, FrameProcessingError, StrataError
from .export import summarize
from .geometry import unproject_depth
from .merging import InstanceMap, make_records, timed_merge
from .models import FrameTiming, MapExport, RunConfig, RunEvent, RunState
from .sequence import Frame, prefetch
from .superpoint import build_superpoints, lift_masks, pool_superpoints, surrogate_point_features
from .weights import WeightBundle, load_weights

LOGGER = logging.getLogger(__name__)


@dataclass
class RunResult:
    state: RunState
    instance_map: InstanceMap
    positions: np.ndarray
    timings: list[FrameTiming] = field(default_factory=list)
    events: list[RunEvent] = field(default_factory=list)
    export: MapExport | None = None


class StreamingOrchestrator:
    def __init__(self, config: RunConfig, weights: WeightBundle | None = None) -> None:
        self.config = config
        if weights is None:
            weights = load_weights(config.weights_path) if config.weights_path else WeightBundle()
        self.weights = weights
        self.state = RunState.IDLE
        self.instance_map = InstanceMap()
        self.timings: list[FrameTiming] = []
        self.events: list[RunEvent] = []
        self._positions: list[np.ndarray] = []
        self._log(
            "orchestrator",
            "configured",
            {
                "overrides": config.overrides(),
                "geo_pool": weights.geo_pool is not None,
                "decoder": weights.decoder is not None,
                "heads": weights.heads is not None,
            },
        )

    def run(self, frames: Iterable[Frame]) -> RunResult:
        if self.state != RunState.IDLE:
            raise StrataError(f"orchestrator already used (state {self.state.value})")
        self._transition(RunState.STREAMING, "stream_opened", {"prefetch": self.config.prefetch})
        current = None
        try:
            for frame in prefetch(frames, self.config.prefetch):
                current = frame.index
                self.process_frame(frame)
        except FrameProcessingError as exc:
            self._transition(RunState.FAILED, "frame_error", {"frame": exc.frame_index, "error": str(exc.cause)})
            raise
        except StrataError as exc:
            self._transition(RunState.FAILED, "read_error", {"after_frame": current, "error": str(exc)})
            raise
        self._transition(
            RunState.COMPLETED,
            "stream_closed",
            {"frames": self.instance_map.frames, "instances": len(self.instance_map.records)},
        )
        return RunResult(
            state=self.state,
            instance_map=self.instance_map,
            positions=self.positions(),
            timings=list(self.timings),
            events=list(self.events),
            export=self.export(),
        )

    def process_frame(self, frame: Frame) -> FrameTiming:
        try:
            return self._process(frame)
        except FrameProcessingError:
            raise
        except Exception as exc:
            raise FrameProcessingError(frame.index, exc) from exc

    def _process(self, frame: Frame) -> FrameTiming:
        cfg = self.config
        started = time.perf_counter()
        cloud = unproject_depth(frame.depth, frame.intrinsics, frame.pose, frame.index)
        superpoints = build_superpoints(cloud.positions, lift_masks(frame.mask, cloud), cfg.normalization, cfg.center)
        if frame.features is not None:
            features = np.asarray(frame.features, dtype=np.float64)
            if features.shape[0] != len(cloud):
                raise ConfigurationError(f"{features.shape[0]} feature rows for {len(cloud)} points")
        else:
            features = surrogate_point_features(cloud.positions, superpoints, cfg.channels)
        sp_features, point_w = pool_superpoints(features, superpoints, cfg.pooling, self.weights.geo_pool, cfg.pool_divisor)
        pooled = time.perf_counter()

        queries = init_queries(sp_features, cfg.sample_ratio, cfg.seed + frame.index)
        if self.weights.decoder is not None:
            queries, masks = decode(
                queries, sp_features, features, superpoints, self.weights.decoder, cfg.mask_threshold, point_w, cfg.pool_divisor
            )
        else:
            masks = passthrough_masks(queries, superpoints)
        masks, keep = mask_nms(masks, cfg.nms_iou)
        queries = queries.select(keep)
        records = make_records(
            queries,
            masks,
            superpoints,
            self.weights.heads,
            positions=cloud.positions,
            point_offset=self.instance_map.point_count,
            num_classes=cfg.num_classes,
            semantics=self._mask_table(frame, "semantics", superpoints.labels, self.config.num_classes),
            boxes=self._mask_table(frame, "boxes", superpoints.labels, 6),
            contrastive=self._mask_table(frame, "contrastive", superpoints.labels),
            box_activation=cfg.box_activation,
        )
        decoded = time.perf_counter()

        self.instance_map, merge_timing = timed_merge(
            self.instance_map,
            records,
            cfg.prune_threshold,
            len(cloud),
            cfg.similarity_terms,
            cfg.confidence_fusion,
        )
        done = time.perf_counter()
        self._positions.append(cloud.positions)

        timing = FrameTiming(
            frame_index=frame.index,
            backbone_surrogate=(pooled - started) * 1000.0,
            decoder=(decoded - pooled) * 1000.0,
            similarity=merge_timing.similarity,
            matching=merge_timing.matching,
            updating=merge_timing.updating,
            total=(done - started) * 1000.0,
        )
        self.timings.append(timing)
        self._log(
            "merger",
            "frame_merged",
            {
                "frame": frame.index,
                "points": len(cloud),
                "superpoints": superpoints.count,
                "masks": len(records),
                "instances": len(self.instance_map.records),
            },
        )
        LOGGER.debug("frame %05d: %d masks, %d instances", frame.index, len(records), len(self.instance_map.records))
        return timing

    def _mask_table(self, frame: Frame, name: str, mask_ids: np.ndarray, width: int | None = None) -> np.ndarray | None:
        table = getattr(frame.meta, name, None)
        if table is None:
            return None
        if table.ndim != 2 or (width is not None and table.shape[1] != width):
            raise ConfigurationError(f"frame {name} have shape {table.shape}, expected {width or 'C'} columns")
        if mask_ids.size and mask_ids.max() >= table.shape[0]:
            raise ConfigurationError(f"frame has mask id {int(mask_ids.max())} but only {table.shape[0]} {name} rows")
        return table

    def positions(self) -> np.ndarray:
        return np.concatenate(self._positions) if self._positions else np.zeros((0, 3))

    def export(self) -> MapExport:
        return summarize(self.instance_map, self.config, self.config.weights_path)

    def _transition(self, new_state: RunState, reason: str, details: dict) -> None:
        old_state = self.state
        self.state = new_state
        self._log("orchestrator", "state_transition", {"from": old_state.value, "to": new_state.value, "reason": reason, **details})

    def _log(self, stage: str, action: str, details: dict) -> None:
        self.events.append(RunEvent(stage=stage, action=action, details=details))
