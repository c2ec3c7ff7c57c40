"""Set-prediction machinery: per-pair losses, the matching cost matrix,
optimal bipartite assignment, and loss aggregation.

Predictions are passed as parallel (logits, boxes) containers, ground truth
as labeled boxes. Every prediction matched by the assignment is supervised
against its ground truth; the rest are treated as background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .geometry import Box3D, corner_distance, iou_aa, iou_oriented, normalize_heading

# Relative slack when testing whether a partial assignment still completes at
# the optimal cost (float sums reassociate).
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class CostWeights:
    """Weights of the matching-cost/loss terms plus focal parameters."""

    w_cls: float = 1.5
    w_l1: float = 0.45
    w_iou: float = 2.0
    w_cor: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("w_cls", "w_l1", "w_iou", "w_cor"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative scalar, got {v}")


@dataclass
class MatchResult:
    """Injective assignment of ground truths to predictions.

    ``pairs`` holds (prediction index, gt index) for every gt column;
    ``unmatched_preds`` lists the remaining prediction indices;
    ``pair_terms`` carries the per-pair cost decomposition (cls/l1/iou/total).
    """

    pairs: list[tuple[int, int]]
    unmatched_preds: list[int]
    total_cost: float
    pair_terms: list[dict[str, float]] = field(default_factory=list)


def focal_loss(
    logits: np.ndarray,
    target: int | None,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> float:
    """Sigmoid focal loss summed over classes.

    ``target`` is a class index, or None for background (all-zeros target).
    Per class: -alpha * (1 - p_t)^gamma * log(p_t) with p_t the probability
    of the true binary label, so gamma=0, alpha=1 reduces to summed binary
    cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t = np.zeros_like(logits)
    if target is not None:
        if not 0 <= target < logits.shape[-1]:
            raise ValueError(f"class index {target} out of range")
        t[target] = 1.0
    z = np.where(t == 1.0, logits, -logits)  # logit of the true label
    pt = expit(z)
    log_pt = -np.logaddexp(0.0, -z)
    return float(np.sum(alpha * (1.0 - pt) ** gamma * (-log_pt)))


def focal_loss_grad(
    logits: np.ndarray,
    target: int | None,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """Analytic d focal / d logits."""
    logits = np.asarray(logits, dtype=np.float64)
    t = np.zeros_like(logits)
    if target is not None:
        t[target] = 1.0
    z = np.where(t == 1.0, logits, -logits)
    q = expit(z)
    log_q = -np.logaddexp(0.0, -z)
    # d/dz of -alpha (1-q)^gamma log q, then dz/dlogit = +/-1.
    dz = alpha * (gamma * q * (1.0 - q) ** gamma * log_q - (1.0 - q) ** (gamma + 1.0))
    return np.where(t == 1.0, dz, -dz)


def _box_params(box: Box3D) -> np.ndarray:
    return np.concatenate([box.center, box.size, [box.heading]])


def l1_box_loss(pred: Box3D, gt: Box3D, scene_scale: np.ndarray) -> float:
    """Mean absolute difference of the normalized 7-tuple
    (center/scale, size/scale, heading/pi), heading difference wrapped."""
    scale = np.asarray(scene_scale, dtype=np.float64)
    if not (scale > 0).all():
        raise ValueError("scene_scale components must be positive")
    dc = np.abs(pred.center - gt.center) / scale
    ds = np.abs(pred.size - gt.size) / scale
    dh = abs(normalize_heading(pred.heading - gt.heading)) / math.pi
    return float((dc.sum() + ds.sum() + dh) / 7.0)


def l1_box_loss_grad(pred: Box3D, gt: Box3D, scene_scale: np.ndarray) -> np.ndarray:
    """Analytic gradient w.r.t. the prediction's 7 parameters
    (center, size, heading). Valid away from zero differences."""
    scale = np.asarray(scene_scale, dtype=np.float64)
    g = np.zeros(7)
    g[0:3] = np.sign(pred.center - gt.center) / scale / 7.0
    g[3:6] = np.sign(pred.size - gt.size) / scale / 7.0
    g[6] = np.sign(normalize_heading(pred.heading - gt.heading)) / math.pi / 7.0
    return g


def iou_loss(pred: Box3D, gt: Box3D) -> float:
    """1 - IoU; exact axis-aligned IoU when both headings are zero, rotated
    polygon-clipping IoU otherwise."""
    if pred.heading == 0.0 and gt.heading == 0.0:
        return 1.0 - iou_aa(pred, gt)
    return 1.0 - iou_oriented(pred, gt)


def iou_aa_loss_grad(pred: Box3D, gt: Box3D) -> np.ndarray:
    """Analytic gradient of the axis-aligned IoU loss w.r.t. the prediction's
    (center, size), shape (6,). Valid for overlapping boxes away from
    min/max ties."""
    if pred.heading != 0.0 or gt.heading != 0.0:
        raise ValueError("analytic IoU gradient requires axis-aligned boxes")
    lo_p, hi_p = pred.center - pred.size / 2.0, pred.center + pred.size / 2.0
    lo_g, hi_g = gt.center - gt.size / 2.0, gt.center + gt.size / 2.0
    overlap = np.minimum(hi_p, hi_g) - np.maximum(lo_p, lo_g)
    if (overlap <= 0).any():
        return np.zeros(6)
    inter = float(np.prod(overlap))
    hi_active = (hi_p < hi_g).astype(np.float64)  # pred's top face binds
    lo_active = (lo_p > lo_g).astype(np.float64)  # pred's bottom face binds
    d_overlap_dc = hi_active - lo_active
    d_overlap_ds = 0.5 * hi_active + 0.5 * lo_active
    other = inter / overlap  # product of the other two axes' overlaps
    d_inter = np.concatenate([d_overlap_dc * other, d_overlap_ds * other])
    vol_p = pred.volume
    d_vol = np.concatenate([np.zeros(3), vol_p / pred.size])
    union = vol_p + gt.volume - inter
    d_union = d_vol - d_inter
    d_iou = (d_inter * union - inter * d_union) / union**2
    return -d_iou


def match_cost_matrix(
    pred_logits: np.ndarray,
    pred_boxes: list[Box3D],
    gt_boxes: list[Box3D],
    gt_labels: list[int],
    weights: CostWeights,
    scene_scale: np.ndarray,
) -> np.ndarray:
    """Pairwise matching cost, shape (num preds, num gts):
    w_cls * focal + w_l1 * normalized L1 + w_iou * (1 - IoU)."""
    n_pred, n_gt = len(pred_boxes), len(gt_boxes)
    cost = np.zeros((n_pred, n_gt))
    for j in range(n_gt):
        for i in range(n_pred):
            cost[i, j] = (
                weights.w_cls
                * focal_loss(pred_logits[i], gt_labels[j], weights.focal_alpha, weights.focal_gamma)
                + weights.w_l1 * l1_box_loss(pred_boxes[i], gt_boxes[j], scene_scale)
                + weights.w_iou * iou_loss(pred_boxes[i], gt_boxes[j])
            )
    return cost


def _completion_cost(cost: np.ndarray, rows: np.ndarray, col_start: int) -> float:
    """Optimal assignment cost of columns col_start.. over the given rows."""
    if col_start >= cost.shape[1]:
        return 0.0
    sub = cost[rows, col_start:]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def hungarian(cost: np.ndarray) -> MatchResult:
    """Globally cost-minimal injective assignment of every gt column.

    Requires at least as many rows (predictions) as columns (ground truths)
    and finite entries. Among minimum-cost assignments, returns the
    lexicographically smallest row tuple (column order), found by fixing
    columns left to right to the smallest row that still completes optimally.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    if n_pred < n_gt:
        raise ValueError(f"need at least as many predictions ({n_pred}) as gts ({n_gt})")
    if n_gt == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(n_pred)), total_cost=0.0)

    r, c = linear_sum_assignment(cost)
    optimal = float(cost[r, c].sum())
    tol = _TIE_RTOL * max(1.0, abs(optimal))

    used = np.zeros(n_pred, dtype=bool)
    fixed = 0.0
    assigned_rows: list[int] = []
    for j in range(n_gt):
        free = np.flatnonzero(~used)
        # Cheap lower bound on any completion: per-column minima over free rows.
        remainder_min = float(cost[free][:, j + 1 :].min(axis=0).sum()) if j + 1 < n_gt else 0.0
        chosen = -1
        best_row, best_total = int(free[0]), np.inf
        for row in free:
            here = fixed + cost[row, j]
            if here + remainder_min > optimal + tol:
                continue
            total = here + _completion_cost(cost, free[free != row], j + 1)
            if total <= optimal + tol:
                chosen = int(row)
                break
            if total < best_total:
                best_row, best_total = int(row), total
        if chosen < 0:  # tolerance slipped; take the best free candidate
            chosen = best_row
        used[chosen] = True
        fixed += cost[chosen, j]
        assigned_rows.append(chosen)

    pairs = [(row, j) for j, row in enumerate(assigned_rows)]
    unmatched = [int(i) for i in np.flatnonzero(~used)]
    return MatchResult(pairs=pairs, unmatched_preds=unmatched, total_cost=fixed)


def match_predictions(
    pred_logits: np.ndarray,
    pred_boxes: list[Box3D],
    gt_boxes: list[Box3D],
    gt_labels: list[int],
    weights: CostWeights,
    scene_scale: np.ndarray,
) -> MatchResult:
    """Cost matrix + optimal assignment, with per-pair term decomposition."""
    cost = match_cost_matrix(pred_logits, pred_boxes, gt_boxes, gt_labels, weights, scene_scale)
    result = hungarian(cost)
    for i, j in result.pairs:
        cls = focal_loss(pred_logits[i], gt_labels[j], weights.focal_alpha, weights.focal_gamma)
        l1 = l1_box_loss(pred_boxes[i], gt_boxes[j], scene_scale)
        iou = iou_loss(pred_boxes[i], gt_boxes[j])
        result.pair_terms.append(
            {"cls": cls, "l1": l1, "iou": iou, "total": float(cost[i, j])}
        )
    return result


def set_loss(
    pred_logits: np.ndarray,
    pred_boxes: list[Box3D],
    gt_boxes: list[Box3D],
    gt_labels: list[int],
    match: MatchResult,
    weights: CostWeights,
    scene_scale: np.ndarray,
    normalization: str = "gt",
) -> float:
    """Set-prediction loss over one stage's predictions.

    Matched pairs contribute w_cls * focal + w_l1 * L1 + w_iou * (1 - IoU)
    + w_cor * corner distance; unmatched predictions contribute background
    focal loss. Normalized by max(num gts, 1) ("gt"), by the prediction
    count ("preds"), or not at all ("none").
    """
    if normalization not in ("gt", "preds", "none"):
        raise ValueError(f"unknown normalization {normalization!r}")
    total = 0.0
    for i, j in match.pairs:
        total += (
            weights.w_cls
            * focal_loss(pred_logits[i], gt_labels[j], weights.focal_alpha, weights.focal_gamma)
            + weights.w_l1 * l1_box_loss(pred_boxes[i], gt_boxes[j], scene_scale)
            + weights.w_iou * iou_loss(pred_boxes[i], gt_boxes[j])
            + weights.w_cor * corner_distance(pred_boxes[i], gt_boxes[j])
        )
    for i in match.unmatched_preds:
        total += weights.w_cls * focal_loss(
            pred_logits[i], None, weights.focal_alpha, weights.focal_gamma
        )
    if normalization == "gt":
        total /= max(len(gt_boxes), 1)
    elif normalization == "preds":
        total /= max(len(pred_boxes), 1)
    return float(total)


def total_loss(l_initial: float, l_nsm: float, l_prm_per_stage: list[float]) -> float:
    """Total training loss: initial-head loss + suppression loss + the sum of
    per-refinement set losses."""
    values = [l_initial, l_nsm, *l_prm_per_stage]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("loss terms must be finite")
    return float(l_initial + l_nsm + sum(l_prm_per_stage))
