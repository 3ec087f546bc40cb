"""Mask lifting and superpoint pooling.

A frame's 2D instance masks partition its point cloud into superpoints; point
features are pooled per superpoint, optionally weighted by each point's place
inside the superpoint's normalized shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import ConfigurationError, EmptyInputError
from .geometry import PointCloud
from .nn import Mlp

LOGGER = logging.getLogger(__name__)

UNMASKED = -1

Normalization = Literal["scalar", "per_axis"]
Center = Literal["centroid", "box"]
Divisor = Literal["count", "weight"]


@dataclass(frozen=True)
class MaskImage:
    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ConfigurationError(f"mask image must be 2-D, got shape {labels.shape}")
        labels = labels.astype(np.int64, copy=False)
        if np.any(labels < UNMASKED):
            raise ConfigurationError("mask ids must be -1 or non-negative")
        present = np.unique(labels[labels >= 0])
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise ConfigurationError("mask ids must be contiguous from 0")
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0


@dataclass(frozen=True)
class GeoPoolWeights:
    mlp_local: Mlp
    mlp_weight: Mlp

    def __post_init__(self) -> None:
        if self.mlp_local.in_dim != 3:
            raise ConfigurationError("local MLP must take 3-D positions")
        if self.mlp_weight.in_dim != 2 * self.mlp_local.out_dim or self.mlp_weight.out_dim != 1:
            raise ConfigurationError("weight MLP must map 2C channels to 1")

    @property
    def channels(self) -> int:
        return self.mlp_local.out_dim


@dataclass(frozen=True)
class SuperpointSet:
    index: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    normalized: np.ndarray

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])

    def members(self, superpoint: int) -> np.ndarray:
        return np.flatnonzero(self.index == superpoint)


def lift_masks(mask: MaskImage, cloud: PointCloud) -> np.ndarray:
    if mask.labels.shape != tuple(cloud.image_shape):
        raise ConfigurationError(f"mask is {mask.labels.shape}, point cloud came from {cloud.image_shape}")
    u, v = cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]
    return mask.labels[v, u].astype(np.int64)


def _group_matrix(index: np.ndarray, count: int) -> sparse.csr_matrix:
    valid = np.flatnonzero(index >= 0)
    return sparse.csr_matrix(
        (np.ones(valid.size), (index[valid], valid)),
        shape=(count, index.shape[0]),
    )


def scatter_sum(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    flat = values.ndim == 1
    out = np.asarray(_group_matrix(index, count) @ (values[:, None] if flat else values))
    return out[:, 0] if flat else out


def scatter_mean(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    sums = scatter_sum(values, index, count)
    counts = np.bincount(index[index >= 0], minlength=count).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    return sums / (counts if sums.ndim == 1 else counts[:, None])


def scatter_max(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    valid = index >= 0
    out = np.full((count,) + values.shape[1:], -np.inf)
    np.maximum.at(out, index[valid], values[valid])
    out[np.isneginf(out)] = 0.0
    return out


def normalize_superpoint(
    points: np.ndarray,
    normalization: Normalization = "scalar",
    center: Center = "centroid",
) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyInputError("cannot normalize an empty superpoint")
    lo, hi = points.min(axis=0), points.max(axis=0)
    origin = points.mean(axis=0) if center == "centroid" else (lo + hi) / 2.0
    extent = hi - lo
    if normalization == "scalar":
        extent = np.full(3, extent.max())
    offsets = points - origin
    normalized = np.divide(offsets, extent, out=np.zeros_like(offsets), where=extent > 0)
    return origin, normalized


def build_superpoints(
    positions: np.ndarray,
    index: np.ndarray,
    normalization: Normalization = "scalar",
    center: Center = "centroid",
) -> SuperpointSet:
    """Group points by lifted mask id, dropping ids that received no point."""
    index = np.asarray(index, dtype=np.int64)
    present = np.unique(index[index >= 0])
    remap = np.full(int(index.max(initial=-1)) + 2, UNMASKED, dtype=np.int64)
    remap[present] = np.arange(present.size)
    compact = remap[index]
    count = int(present.size)

    lo = -scatter_max(-positions, compact, count)
    hi = scatter_max(positions, compact, count)
    origins = scatter_mean(positions, compact, count) if center == "centroid" else (lo + hi) / 2.0
    extent = hi - lo
    if normalization == "scalar":
        extent = np.repeat(extent.max(axis=1, keepdims=True), 3, axis=1)

    assigned = compact >= 0
    normalized = np.zeros_like(positions, dtype=np.float64)
    offsets = positions[assigned] - origins[compact[assigned]]
    scale = extent[compact[assigned]]
    normalized[assigned] = np.divide(offsets, scale, out=np.zeros_like(offsets), where=scale > 0)
    LOGGER.debug("built %d superpoints over %d points (%d unassigned)", count, len(index), int((~assigned).sum()))
    return SuperpointSet(index=compact, labels=present, centers=origins, normalized=normalized)


def geo_features(normalized: np.ndarray, weights: GeoPoolWeights) -> tuple[np.ndarray, np.ndarray]:
    normalized = np.asarray(normalized, dtype=np.float64).reshape(-1, 3)
    if normalized.shape[0] == 0:
        raise EmptyInputError("superpoint has no points")
    z_local = weights.mlp_local(normalized)
    return z_local, z_local.max(axis=0)


def point_weights(z_local: np.ndarray, z_global: np.ndarray, weights: GeoPoolWeights) -> np.ndarray:
    z_global = np.broadcast_to(z_global, z_local.shape)
    return expit(weights.mlp_weight(np.concatenate([z_local, z_global], axis=1))).reshape(-1)


def geometric_weights(
    superpoints: SuperpointSet,
    weights: GeoPoolWeights | None,
    channels: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point weights and per-superpoint global shape features for a whole frame.

    Without weights every point counts 1 and the shape term is zero, which
    reduces geometric pooling to plain mean pooling.
    """
    assigned = superpoints.index >= 0
    if weights is None:
        return assigned.astype(np.float64), np.zeros((superpoints.count, channels))
    if weights.channels != channels:
        raise ConfigurationError(f"geometric pooling weights have {weights.channels} channels, features have {channels}")
    z_local = weights.mlp_local(superpoints.normalized)
    z_global = scatter_max(z_local, superpoints.index, superpoints.count)
    point_w = np.zeros(len(superpoints.index))
    rows = np.flatnonzero(assigned)
    point_w[rows] = point_weights(z_local[rows], z_global[superpoints.index[rows]], weights)
    return point_w, z_global


def geometric_pool(
    point_features: np.ndarray,
    superpoints: SuperpointSet,
    point_w: np.ndarray,
    z_global: np.ndarray,
    divisor: Divisor = "count",
) -> np.ndarray:
    point_features = np.asarray(point_features, dtype=np.float64)
    if z_global.shape != (superpoints.count, point_features.shape[1]):
        raise ConfigurationError(f"shape feature {z_global.shape} does not match point features {point_features.shape}")
    weighted = point_features * point_w[:, None]
    if divisor == "count":
        pooled = scatter_mean(weighted, superpoints.index, superpoints.count)
    else:
        totals = scatter_sum(point_w, superpoints.index, superpoints.count)
        sums = scatter_sum(weighted, superpoints.index, superpoints.count)
        pooled = np.divide(sums, totals[:, None], out=np.zeros_like(sums), where=totals[:, None] > 0)
    return pooled + z_global


def pool_superpoints(
    point_features: np.ndarray,
    superpoints: SuperpointSet,
    mode: Literal["geometric", "average", "max"],
    weights: GeoPoolWeights | None = None,
    divisor: Divisor = "count",
) -> tuple[np.ndarray, np.ndarray]:
    """Superpoint features and the per-point weights reused for mask pooling."""
    channels = point_features.shape[1]
    if mode == "average":
        return scatter_mean(point_features, superpoints.index, superpoints.count), (superpoints.index >= 0).astype(float)
    if mode == "max":
        return scatter_max(point_features, superpoints.index, superpoints.count), (superpoints.index >= 0).astype(float)
    point_w, z_global = geometric_weights(superpoints, weights, channels)
    return geometric_pool(point_features, superpoints, point_w, z_global, divisor), point_w


def pool_mask(
    point_masks: np.ndarray,
    superpoints: SuperpointSet,
    point_w: np.ndarray,
    threshold: float,
    divisor: Divisor = "count",
) -> np.ndarray:
    """Pool ``Q x N`` point masks to ``Q x M`` superpoint masks with the pooling weights."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("mask threshold must lie in (0, 1)")
    point_masks = np.atleast_2d(np.asarray(point_masks, dtype=bool))
    weighted = (point_masks * point_w[None, :]).T
    if divisor == "count":
        pooled = scatter_mean(weighted, superpoints.index, superpoints.count)
    else:
        totals = scatter_sum(point_w, superpoints.index, superpoints.count)
        sums = scatter_sum(weighted, superpoints.index, superpoints.count)
        pooled = np.divide(sums, totals[:, None], out=np.zeros_like(sums), where=totals[:, None] > 0)
    return (pooled > threshold).T


def surrogate_point_features(positions: np.ndarray, superpoints: SuperpointSet, channels: int) -> np.ndarray:
    """Headless stand-in for backbone features: world position, in-superpoint shape and a bias, tiled to ``channels``."""
    base = np.concatenate([positions, superpoints.normalized, np.ones((positions.shape[0], 1))], axis=1)
    return base[:, np.arange(channels) % base.shape[1]]
