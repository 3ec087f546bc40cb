"""Online query merging.

Every instance is summarised by fixed-size vectors (box, contrastive feature,
semantic distribution), so matching a frame against the whole map is a few
matrix operations plus one assignment problem.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from .decoder import PredictedMasks, QuerySet
from .errors import ConfigurationError, IntegrityError
from .geometry import Aabb, aabb_iou_matrix
from .nn import Mlp, softplus
from .superpoint import SuperpointSet

LOGGER = logging.getLogger(__name__)

ALL_TERMS: tuple[str, ...] = ("box", "contrastive", "semantic")
UNREGISTERED = -1

Fusion = Literal["max", "mean"]
BoxActivation = Literal["relu", "softplus"]


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    point_ids: np.ndarray
    box: np.ndarray
    contrastive: np.ndarray
    semantic: np.ndarray
    n: int = 1
    confidence: float = 1.0

    def __post_init__(self) -> None:
        point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        box = np.asarray(self.box, dtype=np.float64).reshape(6)
        semantic = np.asarray(self.semantic, dtype=np.float64).reshape(-1)
        if point_ids.size == 0:
            raise IntegrityError("an instance needs at least one point")
        if np.any(np.diff(point_ids) <= 0):
            raise IntegrityError("instance point ids must be sorted and unique")
        if self.n < 1:
            raise IntegrityError("merge count must be at least 1")
        if np.any(semantic < 0):
            raise IntegrityError("semantic distribution must be non-negative")
        if np.any(box[:3] > box[3:]):
            raise IntegrityError("instance box has min above max")
        object.__setattr__(self, "point_ids", point_ids)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "contrastive", np.asarray(self.contrastive, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "semantic", semantic)

    @property
    def aabb(self) -> Aabb:
        return Aabb.from_vector(self.box)


@dataclass(frozen=True)
class InstanceMap:
    records: tuple[InstanceRecord, ...] = ()
    point_count: int = 0
    next_instance_id: int = 0
    frames: int = 0

    def point_labels(self) -> np.ndarray:
        labels = np.full(self.point_count, UNREGISTERED, dtype=np.int64)
        for record in self.records:
            labels[record.point_ids] = record.instance_id
        return labels


@dataclass(frozen=True)
class HeadWeights:
    box: Mlp | None = None
    contrastive: Mlp | None = None
    semantic: Mlp | None = None

    def __post_init__(self) -> None:
        if self.box is not None and self.box.out_dim != 6:
            raise ConfigurationError("box head must regress 6 offsets")
        dims = {head.in_dim for head in (self.box, self.contrastive, self.semantic) if head is not None}
        if len(dims) > 1:
            raise ConfigurationError(f"auxiliary heads disagree on input channels: {sorted(dims)}")

    @classmethod
    def random(cls, channels: int, contrastive_dim: int, num_classes: int, rng: np.random.Generator) -> HeadWeights:
        return cls(
            box=Mlp.random((channels, channels, 6), rng),
            contrastive=Mlp.random((channels, channels, contrastive_dim), rng),
            semantic=Mlp.random((channels, channels, num_classes), rng),
        )


@dataclass(frozen=True)
class MergeTiming:
    similarity: float
    matching: float
    updating: float


def exclusive_masks(masks: PredictedMasks) -> tuple[PredictedMasks, np.ndarray]:
    """Give every claimed point to its highest-logit mask (lowest row on ties) and drop emptied masks."""
    if len(masks) == 0:
        return masks, np.zeros(0, dtype=np.int64)
    claimed = masks.point_masks.any(axis=0)
    owner = np.argmax(np.where(masks.point_masks, masks.logits, -np.inf), axis=0)
    exclusive = np.zeros_like(masks.point_masks)
    points = np.flatnonzero(claimed)
    exclusive[owner[points], points] = True
    keep = np.flatnonzero(exclusive.any(axis=1))
    return PredictedMasks(exclusive[keep], masks.logits[keep], masks.scores[keep], masks.origin[keep]), keep


def _unit_rows(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    return np.divide(values, norms, out=np.zeros_like(values), where=norms > 0)


def make_records(
    queries: QuerySet,
    masks: PredictedMasks,
    superpoints: SuperpointSet,
    heads: HeadWeights | None,
    *,
    positions: np.ndarray,
    point_offset: int,
    num_classes: int,
    semantics: np.ndarray | None = None,
    boxes: np.ndarray | None = None,
    contrastive: np.ndarray | None = None,
    box_activation: BoxActivation = "relu",
) -> list[InstanceRecord]:
    """One unregistered record per mask.

    ``semantics``, ``boxes`` and ``contrastive`` are optional per-frame tables whose
    rows are indexed by original 2D mask id; a supplied table takes precedence over
    the corresponding head.
    """
    if len(queries) != len(masks):
        raise ConfigurationError(f"{len(queries)} queries for {len(masks)} masks")
    masks, keep = exclusive_masks(masks)
    queries = queries.select(keep)
    if len(queries) == 0:
        return []
    heads = heads or HeadWeights()
    features = queries.values
    for head in (heads.box, heads.contrastive, heads.semantic):
        if head is not None and head.in_dim != features.shape[1]:
            raise ConfigurationError(f"head expects {head.in_dim} channels, queries have {features.shape[1]}")

    mask_ids = superpoints.labels[queries.origin]
    if boxes is not None:
        box_rows = np.asarray(boxes, dtype=np.float64)[mask_ids]
    elif heads.box is not None:
        raw = heads.box(features)
        offsets = np.maximum(raw, 0.0) if box_activation == "relu" else softplus(raw)
        centers = superpoints.centers[queries.origin]
        box_rows = np.concatenate([centers - offsets[:, :3], centers + offsets[:, 3:]], axis=1)
    else:
        box_rows = np.stack([np.concatenate([positions[row].min(axis=0), positions[row].max(axis=0)]) for row in masks.point_masks])

    if contrastive is not None:
        embeddings = np.asarray(contrastive, dtype=np.float64)[mask_ids]
    elif heads.contrastive is not None:
        embeddings = heads.contrastive(features)
    else:
        embeddings = _unit_rows(features)

    if semantics is not None:
        semantic = np.asarray(semantics, dtype=np.float64)[mask_ids]
    elif heads.semantic is not None:
        semantic = softmax(heads.semantic(features), axis=1)
    else:
        semantic = np.full((len(queries), num_classes), 1.0 / num_classes)

    return [
        InstanceRecord(
            instance_id=UNREGISTERED,
            point_ids=np.flatnonzero(masks.point_masks[i]) + point_offset,
            box=box_rows[i],
            contrastive=embeddings[i],
            semantic=semantic[i],
            n=1,
            confidence=float(masks.scores[i]),
        )
        for i in range(len(queries))
    ]


def similarity_matrix(
    prev: Sequence[InstanceRecord],
    cur: Sequence[InstanceRecord],
    terms: Iterable[str] = ALL_TERMS,
) -> np.ndarray:
    terms = tuple(terms)
    if not prev or not cur:
        return np.zeros((len(prev), len(cur)))
    total = np.zeros((len(prev), len(cur)))
    if "box" in terms:
        total += aabb_iou_matrix(np.stack([r.box for r in prev]), np.stack([r.box for r in cur]))
    if "contrastive" in terms:
        total += _unit_rows(np.stack([r.contrastive for r in prev])) @ _unit_rows(np.stack([r.contrastive for r in cur])).T
    if "semantic" in terms:
        total += _unit_rows(np.stack([r.semantic for r in prev])) @ _unit_rows(np.stack([r.semantic for r in cur])).T
    return total


def prune(similarity: np.ndarray, threshold: float) -> np.ndarray:
    if not np.isfinite(threshold):
        raise ConfigurationError("prune threshold must be finite")
    return np.where(similarity < threshold, -np.inf, similarity)


def match(pruned: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-total-similarity one-to-one matching over the finite entries.

    Forbidden and non-positive pairs gain nothing, so the solver's full
    assignment restricted to positive allowed pairs is an optimal partial
    matching. A finite pair with similarity <= 0 is never returned, even when
    a prune threshold <= 0 let it through; such a pair is registered as new.
    """
    if pruned.size == 0:
        return []
    allowed = np.isfinite(pruned)
    gain = np.where(allowed, np.maximum(pruned, 0.0), 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if allowed[r, c] and pruned[r, c] > 0]


def fuse(prev: InstanceRecord, cur: InstanceRecord, fusion: Fusion = "max") -> InstanceRecord:
    n = prev.n
    # incremental mean: equals n/(n+1) * prev + 1/(n+1) * cur
    step = 1.0 / (n + 1)
    confidence = max(prev.confidence, cur.confidence) if fusion == "max" else prev.confidence + (cur.confidence - prev.confidence) * step
    return replace(
        prev,
        point_ids=np.union1d(prev.point_ids, cur.point_ids),
        box=prev.box + (cur.box - prev.box) * step,
        contrastive=prev.contrastive + (cur.contrastive - prev.contrastive) * step,
        semantic=prev.semantic + (cur.semantic - prev.semantic) * step,
        n=n + 1,
        confidence=float(confidence),
    )


def _check_point_range(cur: Sequence[InstanceRecord], lo: int, hi: int) -> None:
    for record in cur:
        if record.point_ids[0] < lo or record.point_ids[-1] >= hi:
            raise IntegrityError(f"record points [{record.point_ids[0]}, {record.point_ids[-1]}] fall outside frame range [{lo}, {hi})")


def merge_step(
    instance_map: InstanceMap,
    cur: Sequence[InstanceRecord],
    prune_threshold: float,
    frame_points: int,
    assignment: Sequence[tuple[int, int]] | None = None,
    terms: Iterable[str] = ALL_TERMS,
    fusion: Fusion = "max",
) -> InstanceMap:
    lo = instance_map.point_count
    hi = lo + frame_points
    _check_point_range(cur, lo, hi)
    if assignment is None:
        assignment = match(prune(similarity_matrix(instance_map.records, cur, terms), prune_threshold))

    records = list(instance_map.records)
    matched: set[int] = set()
    for i, j in assignment:
        records[i] = fuse(records[i], cur[j], fusion)
        matched.add(j)

    next_id = instance_map.next_instance_id
    for j, record in enumerate(cur):
        if j in matched:
            continue
        records.append(replace(record, instance_id=next_id, n=1))
        next_id += 1
    LOGGER.debug("merged %d masks, registered %d new instances", len(matched), next_id - instance_map.next_instance_id)
    return InstanceMap(tuple(records), hi, next_id, instance_map.frames + 1)


def timed_merge(
    instance_map: InstanceMap,
    cur: Sequence[InstanceRecord],
    prune_threshold: float,
    frame_points: int,
    terms: Iterable[str] = ALL_TERMS,
    fusion: Fusion = "max",
) -> tuple[InstanceMap, MergeTiming]:
    started = time.perf_counter()
    similarity = similarity_matrix(instance_map.records, cur, terms)
    pruned = prune(similarity, prune_threshold)
    scored = time.perf_counter()
    assignment = match(pruned)
    matched = time.perf_counter()
    updated_map = merge_step(instance_map, cur, prune_threshold, frame_points, assignment, terms, fusion)
    done = time.perf_counter()
    timing = MergeTiming(
        similarity=(scored - started) * 1000.0,
        matching=(matched - scored) * 1000.0,
        updating=(done - matched) * 1000.0,
    )
    return updated_map, timing


def frame_update(
    instance_map: InstanceMap,
    queries: QuerySet,
    masks: PredictedMasks,
    superpoints: SuperpointSet,
    heads: HeadWeights | None,
    prune_threshold: float,
    *,
    positions: np.ndarray,
    num_classes: int,
    semantics: np.ndarray | None = None,
    boxes: np.ndarray | None = None,
    contrastive: np.ndarray | None = None,
    box_activation: BoxActivation = "relu",
    terms: Iterable[str] = ALL_TERMS,
    fusion: Fusion = "max",
) -> InstanceMap:
    records = make_records(
        queries,
        masks,
        superpoints,
        heads,
        positions=positions,
        point_offset=instance_map.point_count,
        num_classes=num_classes,
        semantics=semantics,
        boxes=boxes,
        contrastive=contrastive,
        box_activation=box_activation,
    )
    updated_map, _ = timed_merge(instance_map, records, prune_threshold, positions.shape[0], terms, fusion)
    return updated_map
