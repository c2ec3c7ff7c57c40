"""Noise-suppressed Hough voting: objectness-gated votes and their losses.

Each seed predicts a centroid offset, a feature offset, and a two-way
objectness score [negative; positive]. The positive softmax probability
gates the offsets, so seeds that look like background barely move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import Box3D, points_in_box, smooth_l1

# Offset-magnitude histogram: 50 uniform bins on [0, 2] m plus an overflow bin.
HISTOGRAM_BIN_EDGES = np.append(np.linspace(0.0, 2.0, 51), np.inf)


@dataclass(frozen=True)
class SeedSet:
    """Seed positions (m, 3) and features (m, c)."""

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (m, 3), got {pos.shape}")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ValueError(f"features must be (m, c), got {feat.shape}")
        if not np.isfinite(pos).all() or not np.isfinite(feat).all():
            raise ValueError("seed positions/features must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class VotePrediction:
    """Per-seed predictions: offsets (m, 3), feature offsets (m, c),
    objectness logits (m, 2) ordered [negative, positive]."""

    offsets: np.ndarray
    feature_offsets: np.ndarray
    objectness_logits: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64)
        foff = np.asarray(self.feature_offsets, dtype=np.float64)
        logits = np.asarray(self.objectness_logits, dtype=np.float64)
        m = off.shape[0]
        if off.ndim != 2 or off.shape[1] != 3:
            raise ValueError(f"offsets must be (m, 3), got {off.shape}")
        if foff.shape[0] != m or logits.shape != (m, 2):
            raise ValueError("vote prediction shapes are inconsistent")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "feature_offsets", foff)
        object.__setattr__(self, "objectness_logits", logits)

    @property
    def count(self) -> int:
        return self.offsets.shape[0]

    def gates(self) -> np.ndarray:
        """softmax(logits)[:, positive] in (0, 1), shape (m,)."""
        return expit(self.objectness_logits[:, 1] - self.objectness_logits[:, 0])


@dataclass(frozen=True)
class VoteSet:
    """Gated vote positions (m, 3) and features (m, c)."""

    positions: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class SeedLabels:
    """Binary objectness labels (m,) and offset targets (m, 3).

    Offset targets are only meaningful on rows where objectness == 1.
    """

    objectness: np.ndarray
    offset_targets: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.objectness.astype(bool)


def suppress_votes(seeds: SeedSet, pred: VotePrediction, gate_features: bool = True) -> VoteSet:
    """Build votes Y = X + offset * gate, gate = softmax(objectness)[positive].

    Feature offsets are gated the same way by default; ``gate_features=False``
    adds them ungated.
    """
    if pred.count != seeds.count:
        raise ValueError(f"prediction covers {pred.count} seeds, expected {seeds.count}")
    if pred.feature_offsets.shape != seeds.features.shape:
        raise ValueError(
            f"feature offsets {pred.feature_offsets.shape} do not match "
            f"seed features {seeds.features.shape}"
        )
    g = pred.gates()[:, None]
    positions = seeds.positions + pred.offsets * g
    features = seeds.features + pred.feature_offsets * (g if gate_features else 1.0)
    return VoteSet(positions=positions, features=features)


def seed_labels(seeds: SeedSet, gt_boxes: list[Box3D]) -> SeedLabels:
    """Label seeds inside any ground-truth box as foreground.

    A seed inside several boxes is assigned to the containing box with the
    nearest center (ties broken by lowest box index); the offset target is
    that box center minus the seed position.
    """
    m = seeds.count
    objectness = np.zeros(m, dtype=np.int64)
    targets = np.zeros((m, 3), dtype=np.float64)
    if not gt_boxes:
        return SeedLabels(objectness, targets)
    inside = np.stack([points_in_box(seeds.positions, box) for box in gt_boxes], axis=1)
    centers = np.stack([box.center for box in gt_boxes])
    dist2 = np.sum((seeds.positions[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    dist2[~inside] = np.inf
    fg = inside.any(axis=1)
    objectness[fg] = 1
    assigned = np.argmin(dist2[fg], axis=1)  # first minimum = lowest index
    targets[fg] = centers[assigned] - seeds.positions[fg]
    return SeedLabels(objectness, targets)


def nsm_loss(
    pred: VotePrediction,
    labels: SeedLabels,
    lambda_obj: float = 1.0,
    lambda_reg: float = 10.0,
) -> tuple[float, float, float]:
    """Objectness and gated-offset regression losses and their weighted sum.

    Returns (L_obj, L_reg, L_total) where L_obj is the mean cross-entropy of
    softmax(objectness) against the binary labels, L_reg is the mean smooth-L1
    (over foreground seeds and coordinates) between the gated offset and the
    offset target, and L_total = lambda_obj * L_obj + lambda_reg * L_reg.
    """
    if pred.count != labels.objectness.shape[0]:
        raise ValueError("prediction and labels cover different seed counts")
    margin = pred.objectness_logits[:, 1] - pred.objectness_logits[:, 0]
    # CE of the 2-way softmax: -log p(label); stable via logaddexp.
    ce = np.where(labels.objectness == 1, np.logaddexp(0.0, -margin), np.logaddexp(0.0, margin))
    l_obj = float(np.mean(ce)) if pred.count else 0.0
    fg = labels.foreground
    if fg.any():
        gated = pred.offsets[fg] * pred.gates()[fg, None]
        l_reg = float(np.mean(smooth_l1(gated - labels.offset_targets[fg])))
    else:
        l_reg = 0.0
    return l_obj, l_reg, lambda_obj * l_obj + lambda_reg * l_reg


def vote_reg_grad(pred: VotePrediction, labels: SeedLabels) -> np.ndarray:
    """Analytic d L_reg / d offsets at fixed gates, shape (m, 3).

    Background rows are zero; foreground rows carry the smooth-L1 derivative
    of the gated residual scaled by the gate and the mean reduction.
    """
    grad = np.zeros_like(pred.offsets)
    fg = labels.foreground
    n_fg = int(fg.sum())
    if n_fg == 0:
        return grad
    g = pred.gates()[fg, None]
    residual = pred.offsets[fg] * g - labels.offset_targets[fg]
    grad[fg] = np.clip(residual, -1.0, 1.0) * g / (n_fg * 3)
    return grad


@dataclass(frozen=True)
class OffsetHistogram:
    """Per-component |offset| histogram split by foreground/background."""

    bin_edges: np.ndarray
    foreground: np.ndarray
    background: np.ndarray
    gated: bool

    def csv_rows(self) -> list[tuple[float, float, int, int]]:
        rows = []
        for i in range(len(self.foreground)):
            rows.append(
                (
                    float(self.bin_edges[i]),
                    float(self.bin_edges[i + 1]),
                    int(self.foreground[i]),
                    int(self.background[i]),
                )
            )
        return rows


def offset_magnitude_histogram(
    pred: VotePrediction, labels: SeedLabels, gated: bool = True
) -> OffsetHistogram:
    """Histogram of per-component |offset| values, gated or raw, by fg/bg."""
    offsets = pred.offsets * pred.gates()[:, None] if gated else pred.offsets
    mags = np.abs(offsets)
    fg = labels.foreground
    fg_counts, _ = np.histogram(mags[fg].ravel(), bins=HISTOGRAM_BIN_EDGES)
    bg_counts, _ = np.histogram(mags[~fg].ravel(), bins=HISTOGRAM_BIN_EDGES)
    return OffsetHistogram(HISTOGRAM_BIN_EDGES, fg_counts, bg_counts, gated)
