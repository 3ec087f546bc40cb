"""Latency of one merge step (and optionally the decoder) on a synthetic workload."""

from __future__ import annotations

import logging
import time

import numpy as np

from .decoder import DecoderWeights, decode, init_queries
from .merging import InstanceMap, InstanceRecord, timed_merge
from .models import BenchReport
from .superpoint import SuperpointSet

LOGGER = logging.getLogger(__name__)

POINTS_PER_INSTANCE = 200


def _random_record(rng: np.random.Generator, instance_id: int, first_point: int, channels: int, num_classes: int) -> InstanceRecord:
    center = rng.uniform(-5.0, 5.0, 3)
    half = rng.uniform(0.1, 0.5, 3)
    return InstanceRecord(
        instance_id=instance_id,
        point_ids=np.arange(first_point, first_point + POINTS_PER_INSTANCE),
        box=np.concatenate([center - half, center + half]),
        contrastive=rng.normal(size=channels),
        semantic=rng.dirichlet(np.ones(num_classes)),
    )


def synthetic_workload(prev: int, cur: int, channels: int, num_classes: int = 20, seed: int = 0) -> tuple[InstanceMap, list[InstanceRecord]]:
    """A map of ``prev`` instances and ``cur`` fresh records, half of them perturbed copies of mapped instances."""
    rng = np.random.default_rng(seed)
    records = tuple(_random_record(rng, i, i * POINTS_PER_INSTANCE, channels, num_classes) for i in range(prev))
    instance_map = InstanceMap(records, prev * POINTS_PER_INSTANCE, prev, 1)
    offset = instance_map.point_count
    current = []
    for j in range(cur):
        first = offset + j * POINTS_PER_INSTANCE
        record = _random_record(rng, -1, first, channels, num_classes)
        if prev and j % 2 == 0:
            source = records[int(rng.integers(prev))]
            record = InstanceRecord(
                instance_id=-1,
                point_ids=record.point_ids,
                box=source.box + np.repeat([-1.0, 1.0], 3) * rng.uniform(0.0, 0.02),
                contrastive=source.contrastive + rng.normal(scale=0.05, size=channels),
                semantic=source.semantic,
            )
        current.append(record)
    return instance_map, current


def benchmark(
    prev: int = 200,
    cur: int = 50,
    channels: int = 32,
    repeats: int = 10,
    prune_threshold: float = 1.75,
    decoder_points: int = 0,
    seed: int = 0,
) -> BenchReport:
    instance_map, current = synthetic_workload(prev, cur, channels, seed=seed)
    frame_points = cur * POINTS_PER_INSTANCE
    totals = np.zeros(3)
    for _ in range(repeats):
        _, timing = timed_merge(instance_map, current, prune_threshold, frame_points)
        totals += (timing.similarity, timing.matching, timing.updating)
    similarity, matching, updating = totals / max(repeats, 1)

    decoder_ms = None
    if decoder_points > 0 and cur > 0:
        rng = np.random.default_rng(seed)
        weights = DecoderWeights.random(channels, rng)
        index = np.arange(decoder_points) % cur
        superpoints = SuperpointSet(index=index, labels=np.arange(cur), centers=np.zeros((cur, 3)), normalized=np.zeros((decoder_points, 3)))
        point_features = rng.normal(size=(decoder_points, channels))
        sp_features = rng.normal(size=(cur, channels))
        point_w = np.ones(decoder_points)
        started = time.perf_counter()
        for _ in range(repeats):
            decode(init_queries(sp_features), sp_features, point_features, superpoints, weights, 0.5, point_w)
        decoder_ms = (time.perf_counter() - started) * 1000.0 / max(repeats, 1)

    LOGGER.info("bench prev=%d cur=%d: merge %.3f ms", prev, cur, similarity + matching + updating)
    return BenchReport(
        prev=prev,
        cur=cur,
        channels=channels,
        repeats=repeats,
        similarity_ms=float(similarity),
        matching_ms=float(matching),
        updating_ms=float(updating),
        decoder_ms=decoder_ms,
    )
