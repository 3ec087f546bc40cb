"""Loss formulas (value only, used as diagnostics) and class-agnostic AP.

AP protocol: for each mask-IoU threshold, predictions are visited by
descending confidence (ties: larger best IoU first, then lower prediction
index). Each prediction takes the unmatched ground-truth instance with the
highest IoU at or above the threshold (ties: lower ground-truth index);
otherwise it is a false positive. Precision/recall points are recorded at the
end of each confidence level and integrated with all-point interpolation:
``sum((r_i - r_{i-1}) * max_{j >= i} p_j)``. AP averages thresholds
0.50:0.05:0.95; AP50 and AP25 use 0.50 and 0.25.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import PreconditionError
from .geometry import aabb_iou_matrix
from .models import EvalResult, PRCurve, RunConfig

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = RunConfig.model_fields["alpha"].default
    beta: float = RunConfig.model_fields["beta"].default
    tau: float = RunConfig.model_fields["temperature"].default

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise PreconditionError("temperature must be positive")

    @classmethod
    def from_config(cls, config: RunConfig) -> LossWeights:
        return cls(alpha=config.alpha, beta=config.beta, tau=config.temperature)


@dataclass(frozen=True)
class FrameLosses:
    cls: float = 0.0
    bce: float = 0.0
    dice: float = 0.0
    iou: float = 0.0
    sem: float = 0.0
    cont_next: float = 0.0
    cont_prev: float = 0.0


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.size == 0:
        return 0.0
    return float(np.mean(np.logaddexp(0.0, logits) - targets * logits))


def dice_loss(probs: np.ndarray, targets: np.ndarray, smooth: float = DICE_SMOOTH) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    overlap = float(np.sum(probs * targets))
    return 1.0 - (2.0 * overlap + smooth) / (float(probs.sum() + targets.sum()) + smooth)


def iou_loss(box_pred: np.ndarray, box_gt: np.ndarray) -> float:
    box_pred = np.asarray(box_pred, dtype=np.float64).reshape(-1, 6)
    box_gt = np.asarray(box_gt, dtype=np.float64).reshape(-1, 6)
    if box_pred.shape != box_gt.shape:
        raise PreconditionError(f"box shapes differ: {box_pred.shape} vs {box_gt.shape}")
    if box_pred.shape[0] == 0:
        return 0.0
    ious = np.array([aabb_iou_matrix(p[None], g[None])[0, 0] for p, g in zip(box_pred, box_gt)])
    return float(np.mean(1.0 - ious))


def cls_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Foreground/background cross-entropy on the confidence head."""
    return bce_loss(logits, labels)


def sem_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross-entropy of per-category logits against one-hot (or soft) labels."""
    return bce_loss(logits, labels)


def contrastive_loss(f_t: np.ndarray | None, f_next: np.ndarray | None, tau: float) -> float:
    """Adjacent-frame InfoNCE over cosine similarity; row i of both frames is the same instance."""
    if tau <= 0:
        raise PreconditionError("temperature must be positive")
    if f_t is None or f_next is None:
        return 0.0
    f_t = np.asarray(f_t, dtype=np.float64)
    f_next = np.asarray(f_next, dtype=np.float64)
    if f_t.shape != f_next.shape:
        raise PreconditionError(f"feature sets differ in shape: {f_t.shape} vs {f_next.shape}")
    if f_t.shape[0] < 2:
        raise PreconditionError("contrastive loss needs at least two instances")
    a = f_t / np.linalg.norm(f_t, axis=1, keepdims=True)
    b = f_next / np.linalg.norm(f_next, axis=1, keepdims=True)
    logits = (a @ b.T) / tau
    return float(-np.mean(np.diag(log_softmax(logits, axis=1))))


def sequence_contrastive_terms(features: Sequence[np.ndarray], tau: float = LossWeights.tau) -> list[tuple[float, float]]:
    """(t -> t+1, t -> t-1) terms per frame; the boundary terms are 0."""
    terms = []
    for t, f in enumerate(features):
        forward = contrastive_loss(f, features[t + 1], tau) if t + 1 < len(features) else 0.0
        backward = contrastive_loss(f, features[t - 1], tau) if t > 0 else 0.0
        terms.append((forward, backward))
    return terms


def total_loss(frames: Sequence[FrameLosses], weights: LossWeights = LossWeights()) -> float:
    if not frames:
        raise PreconditionError("need at least one frame")
    total = sum(
        weights.alpha * f.cls + f.bce + f.dice + weights.beta * f.iou + f.sem + f.cont_next + f.cont_prev
        for f in frames
    )
    return float(total / len(frames))


def mask_iou_sets(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> np.ndarray:
    ious = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            inter = np.intersect1d(p, g, assume_unique=True).size
            union = p.size + g.size - inter
            ious[i, j] = inter / union if union else 0.0
    return ious


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _ap_at(ious: np.ndarray, order: np.ndarray, levels: np.ndarray, threshold: float) -> tuple[float, PRCurve]:
    n_gt = ious.shape[1]
    taken = np.zeros(n_gt, dtype=bool)
    hits = np.zeros(len(order), dtype=bool)
    for rank, pred in enumerate(order):
        candidates = np.where(~taken & (ious[pred] >= threshold), ious[pred], -1.0)
        best = int(np.argmax(candidates)) if n_gt else -1
        if n_gt and candidates[best] >= 0:
            taken[best] = True
            hits[rank] = True
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # one PR point per confidence level
    ends = np.flatnonzero(np.append(levels[1:] != levels[:-1], True))
    precision = tp[ends] / (tp[ends] + fp[ends])
    recall = tp[ends] / n_gt
    return _interpolated_ap(precision, recall), PRCurve(precision=precision.tolist(), recall=recall.tolist())


def evaluate_ap(
    pred: Sequence[tuple[Sequence[int] | np.ndarray, float]],
    gt: Sequence[Sequence[int] | np.ndarray],
    empty_score: float = 1.0,
) -> EvalResult:
    pred_sets = [np.unique(np.asarray(ids, dtype=np.int64)) for ids, _ in pred]
    gt_sets = [np.unique(np.asarray(ids, dtype=np.int64)) for ids in gt]
    confidences = np.array([float(conf) for _, conf in pred])
    thresholds = sorted({*AP_THRESHOLDS, 0.25})

    if not gt_sets:
        score = empty_score if not pred_sets else 0.0
        return EvalResult(ap=score, ap50=score, ap25=score)
    if not pred_sets:
        return EvalResult(ap=0.0, ap50=0.0, ap25=0.0)

    ious = mask_iou_sets(pred_sets, gt_sets)
    best = ious.max(axis=1)
    order = np.lexsort((np.arange(len(pred_sets)), -best, -confidences))
    levels = confidences[order]

    scores: dict[float, float] = {}
    curves: dict[str, PRCurve] = {}
    for threshold in thresholds:
        scores[threshold], curves[f"{threshold:.2f}"] = _ap_at(ious, order, levels, threshold)
    return EvalResult(
        ap=float(np.mean([scores[t] for t in AP_THRESHOLDS])),
        ap50=scores[0.5],
        ap25=scores[0.25],
        curves=curves,
    )
