"""Inference of the dual-level query decoder.

Cross-attention reads superpoint features; mask prediction reads point
features. The two never swap: ``masked_cross_attention`` only accepts
superpoint features and ``predict_masks`` only accepts point features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigurationError
from .nn import LayerNorm, Linear, Mlp
from .superpoint import Divisor, SuperpointSet, pool_mask

LOGGER = logging.getLogger(__name__)

DECODER_LAYERS = 3
PASSTHROUGH_LOGIT = 20.0

NormPlacement = Literal["pre", "post", "none"]


@dataclass(frozen=True)
class QuerySet:
    values: np.ndarray
    origin: np.ndarray
    layer: int = 0

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def select(self, keep: np.ndarray) -> QuerySet:
        return QuerySet(self.values[keep], self.origin[keep], self.layer)


@dataclass(frozen=True)
class PredictedMasks:
    point_masks: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    origin: np.ndarray

    def __len__(self) -> int:
        return int(self.point_masks.shape[0])

    def select(self, keep: np.ndarray) -> PredictedMasks:
        return PredictedMasks(self.point_masks[keep], self.logits[keep], self.scores[keep], self.origin[keep])


@dataclass(frozen=True)
class AttentionWeights:
    q: Linear
    k: Linear
    v: Linear
    o: Linear

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator) -> AttentionWeights:
        return cls(*(Linear.random(channels, channels, rng) for _ in range(4)))

    @classmethod
    def zeros(cls, channels: int) -> AttentionWeights:
        return cls(*(Linear.zeros(channels, channels) for _ in range(4)))


@dataclass(frozen=True)
class DecoderLayerWeights:
    cross: AttentionWeights
    self_attn: AttentionWeights
    ffn: Mlp
    cross_norm: LayerNorm | None = None
    self_norm: LayerNorm | None = None
    ffn_norm: LayerNorm | None = None

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator) -> DecoderLayerWeights:
        return cls(
            cross=AttentionWeights.random(channels, rng),
            self_attn=AttentionWeights.random(channels, rng),
            ffn=Mlp.random((channels, 2 * channels, channels), rng),
        )

    @classmethod
    def zeros(cls, channels: int) -> DecoderLayerWeights:
        return cls(
            cross=AttentionWeights.zeros(channels),
            self_attn=AttentionWeights.zeros(channels),
            ffn=Mlp.zeros((channels, 2 * channels, channels)),
        )


@dataclass(frozen=True)
class DecoderWeights:
    layers: tuple[DecoderLayerWeights, ...]
    mask_head: Linear
    cls_head: Linear | None = None
    norm: NormPlacement = "pre"
    heads: int = 1
    _identity_norm: LayerNorm = field(init=False, repr=False)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if len(layers) != DECODER_LAYERS:
            raise ConfigurationError(f"decoder needs {DECODER_LAYERS} layers, got {len(layers)}")
        channels = self.mask_head.in_dim
        if self.mask_head.out_dim != channels:
            raise ConfigurationError("mask head must map C channels to C")
        if self.cls_head is not None and (self.cls_head.in_dim != channels or self.cls_head.out_dim != 1):
            raise ConfigurationError("classification head must map C channels to 1")
        if self.norm not in ("pre", "post", "none"):
            raise ConfigurationError(f"unknown norm placement {self.norm!r}")
        if self.heads < 1 or channels % self.heads:
            raise ConfigurationError(f"{channels} channels cannot be split into {self.heads} heads")
        for layer in layers:
            for proj in (*vars(layer.cross).values(), *vars(layer.self_attn).values()):
                if (proj.in_dim, proj.out_dim) != (channels, channels):
                    raise ConfigurationError("attention projections must be C x C")
            if layer.ffn.in_dim != channels or layer.ffn.out_dim != channels:
                raise ConfigurationError("feed-forward stack must map C channels to C")
            for norm in (layer.cross_norm, layer.self_norm, layer.ffn_norm):
                if norm is not None and norm.dim != channels:
                    raise ConfigurationError(f"layer norm over {norm.dim} channels in a {channels}-channel decoder")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "_identity_norm", LayerNorm.identity(channels))

    @property
    def channels(self) -> int:
        return self.mask_head.in_dim

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, with_cls: bool = True) -> DecoderWeights:
        return cls(
            layers=tuple(DecoderLayerWeights.random(channels, rng) for _ in range(DECODER_LAYERS)),
            mask_head=Linear.random(channels, channels, rng),
            cls_head=Linear.random(channels, 1, rng) if with_cls else None,
        )

    @classmethod
    def zeros(cls, channels: int) -> DecoderWeights:
        return cls(
            layers=tuple(DecoderLayerWeights.zeros(channels) for _ in range(DECODER_LAYERS)),
            mask_head=Linear.zeros(channels, channels),
        )

    def norm_for(self, layer: DecoderLayerWeights, name: str) -> LayerNorm:
        return getattr(layer, name) or self._identity_norm


def _check_layer(layer: int) -> None:
    if layer not in range(DECODER_LAYERS):
        raise ConfigurationError(f"decoder layer must be in 0..{DECODER_LAYERS - 1}, got {layer}")


def _attention_probs(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None, heads: int) -> np.ndarray:
    n_q, channels = q.shape
    depth = channels // heads
    qh = q.reshape(n_q, heads, depth).transpose(1, 0, 2)
    kh = k.reshape(k.shape[0], heads, depth).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(depth)
    if mask is not None:
        logits = np.where(mask[None, :, :], logits, -np.inf)
    return softmax(logits, axis=-1)


def _attend(probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    heads, n_q, _ = probs.shape
    vh = v.reshape(v.shape[0], heads, -1).transpose(1, 0, 2)
    return (probs @ vh).transpose(1, 0, 2).reshape(n_q, -1)


def init_queries(superpoint_features: np.ndarray, sample_ratio: float = 1.0, seed: int = 0) -> QuerySet:
    count = superpoint_features.shape[0]
    if not 0.0 < sample_ratio <= 1.0:
        raise ConfigurationError(f"sample ratio must lie in (0, 1], got {sample_ratio}")
    if sample_ratio == 1.0:
        origin = np.arange(count)
    else:
        size = math.ceil(sample_ratio * count)
        origin = np.sort(np.random.default_rng(seed).choice(count, size=size, replace=False))
    return QuerySet(np.array(superpoint_features[origin], dtype=np.float64), origin.astype(np.int64), 0)


def effective_mask(attention_mask: np.ndarray) -> np.ndarray:
    """Rows with nothing to attend to fall back to attending everywhere."""
    mask = np.array(attention_mask, dtype=bool)
    mask[~mask.any(axis=1)] = True
    return mask


def cross_attention_weights(
    queries: QuerySet,
    superpoint_features: np.ndarray,
    attention_mask: np.ndarray,
    weights: DecoderWeights,
    layer: int,
) -> np.ndarray:
    _check_layer(layer)
    if attention_mask.shape != (len(queries), superpoint_features.shape[0]):
        raise ConfigurationError(
            f"attention mask {attention_mask.shape} does not match {len(queries)} queries x "
            f"{superpoint_features.shape[0]} superpoints"
        )
    lw = weights.layers[layer]
    x = queries.values
    if weights.norm == "pre":
        x = weights.norm_for(lw, "cross_norm")(x)
    return _attention_probs(lw.cross.q(x), lw.cross.k(superpoint_features), effective_mask(attention_mask), weights.heads)


def masked_cross_attention(
    queries: QuerySet,
    superpoint_features: np.ndarray,
    attention_mask: np.ndarray,
    weights: DecoderWeights,
    layer: int,
) -> np.ndarray:
    """Attention readout ``softmax(QK^T / sqrt(C) + A) V`` over superpoints."""
    probs = cross_attention_weights(queries, superpoint_features, attention_mask, weights, layer)
    return _attend(probs, weights.layers[layer].cross.v(superpoint_features))


def cross_attention_block(
    queries: QuerySet,
    superpoint_features: np.ndarray,
    attention_mask: np.ndarray,
    weights: DecoderWeights,
    layer: int,
) -> QuerySet:
    lw = weights.layers[layer]
    readout = masked_cross_attention(queries, superpoint_features, attention_mask, weights, layer)
    x = queries.values + lw.cross.o(readout)
    if weights.norm == "post":
        x = weights.norm_for(lw, "cross_norm")(x)
    return QuerySet(x, queries.origin, layer)


def decoder_layer(attended: QuerySet, weights: DecoderWeights, layer: int) -> QuerySet:
    _check_layer(layer)
    lw = weights.layers[layer]
    x = attended.values
    h = weights.norm_for(lw, "self_norm")(x) if weights.norm == "pre" else x
    probs = _attention_probs(lw.self_attn.q(h), lw.self_attn.k(h), None, weights.heads)
    x = x + lw.self_attn.o(_attend(probs, lw.self_attn.v(h)))
    if weights.norm == "post":
        x = weights.norm_for(lw, "self_norm")(x)
    h = weights.norm_for(lw, "ffn_norm")(x) if weights.norm == "pre" else x
    x = x + lw.ffn(h)
    if weights.norm == "post":
        x = weights.norm_for(lw, "ffn_norm")(x)
    return QuerySet(x, attended.origin, layer + 1)


def predict_masks(queries: QuerySet, point_features: np.ndarray, weights: DecoderWeights, threshold: float) -> PredictedMasks:
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("mask threshold must lie in (0, 1)")
    logits = weights.mask_head(queries.values) @ np.asarray(point_features, dtype=np.float64).T
    if weights.cls_head is not None:
        scores = expit(weights.cls_head(queries.values)).reshape(-1)
    else:
        scores = np.ones(len(queries))
    return PredictedMasks(expit(logits) > threshold, logits, scores, queries.origin)


def decode(
    queries: QuerySet,
    superpoint_features: np.ndarray,
    point_features: np.ndarray,
    superpoints: SuperpointSet,
    weights: DecoderWeights,
    threshold: float,
    point_w: np.ndarray,
    divisor: Divisor = "count",
) -> tuple[QuerySet, PredictedMasks]:
    if superpoint_features.shape[1] != weights.channels or point_features.shape[1] != weights.channels:
        raise ConfigurationError(
            f"decoder expects {weights.channels} channels, got {superpoint_features.shape[1]} / {point_features.shape[1]}"
        )
    if superpoint_features.shape[0] == 0:
        n_points = point_features.shape[0]
        empty = PredictedMasks(
            np.zeros((0, n_points), dtype=bool), np.zeros((0, n_points)), np.zeros(0), np.zeros(0, dtype=np.int64)
        )
        return queries, empty
    current = queries
    for layer in range(DECODER_LAYERS):
        masks = predict_masks(current, point_features, weights, threshold)
        attention_mask = pool_mask(masks.point_masks, superpoints, point_w, threshold, divisor)
        attended = cross_attention_block(current, superpoint_features, attention_mask, weights, layer)
        current = decoder_layer(attended, weights, layer)
    return current, predict_masks(current, point_features, weights, threshold)


def passthrough_masks(queries: QuerySet, superpoints: SuperpointSet) -> PredictedMasks:
    """Each query keeps exactly the points of the superpoint it was lifted from."""
    point_masks = superpoints.index[None, :] == queries.origin[:, None]
    logits = np.where(point_masks, PASSTHROUGH_LOGIT, -PASSTHROUGH_LOGIT)
    return PredictedMasks(point_masks, logits, np.ones(len(queries)), queries.origin)


def mask_iou_matrix(point_masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(point_masks, dtype=np.float64)
    inter = masks @ masks.T
    sizes = masks.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def mask_nms(masks: PredictedMasks, iou_threshold: float) -> tuple[PredictedMasks, np.ndarray]:
    """Greedy suppression by descending score; returns survivors and their row indices."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigurationError(f"NMS IoU threshold must lie in (0, 1], got {iou_threshold}")
    candidates = np.flatnonzero(masks.point_masks.any(axis=1))
    order = candidates[np.argsort(-masks.scores[candidates], kind="stable")]
    iou = mask_iou_matrix(masks.point_masks)
    keep: list[int] = []
    for row in order:
        if all(iou[row, kept] <= iou_threshold for kept in keep):
            keep.append(int(row))
    keep_idx = np.array(sorted(keep), dtype=np.int64)
    LOGGER.debug("mask NMS kept %d of %d masks", keep_idx.size, len(masks))
    return masks.select(keep_idx), keep_idx
