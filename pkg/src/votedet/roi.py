"""Multi-resolution RoI grid max-pooling and the gating that compresses the
pooled grids back to one proposal feature.

Feature points inside a proposal box are binned into an r x r x r grid in the
box's canonical frame and max-pooled per cell and channel. A proposal-feature
MLP produces one sigmoid gate per resolution; gated grids are reduced over
cells and summed across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, rot_z
from .tinynet import DenseParams, init_dense, mlp_forward


@dataclass(frozen=True)
class FeaturePointSet:
    """Positions (n, 3) with per-point feature vectors (n, C)."""

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ValueError(f"inconsistent point set shapes {pos.shape} / {feat.shape}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class RoIFeature:
    """Per-resolution pooled grids: for each r, an (r^3, C) array plus an
    occupancy mask. Empty cells are exact zeros with mask False.

    Cells are linearized as (ix * r + iy) * r + iz.
    """

    resolutions: tuple[int, ...]
    grids: list[np.ndarray]
    masks: list[np.ndarray]

    @property
    def channels(self) -> int:
        return self.grids[0].shape[1]

    @property
    def flattened_dim(self) -> int:
        return sum(r**3 for r in self.resolutions) * self.channels

    def flattened(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grids])


@dataclass
class GateParams:
    """One 2-layer MLP per resolution: C -> C (ReLU) -> r^3 * C (sigmoid)."""

    resolutions: tuple[int, ...]
    mlps: list[DenseParams]

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if len(self.mlps) != len(self.resolutions):
            raise ValueError("need one gate MLP per resolution")


def init_gate(
    channels: int, resolutions: tuple[int, ...], rng: np.random.Generator
) -> GateParams:
    mlps = [
        init_dense([channels, channels, r**3 * channels], rng, ["relu", "sigmoid"])
        for r in resolutions
    ]
    return GateParams(tuple(resolutions), mlps)


def roi_pool_multi(
    points: FeaturePointSet, box: Box3D, resolutions: tuple[int, ...]
) -> RoIFeature:
    """Max-pool the feature points inside ``box`` at every resolution.

    Points are mapped to the box canonical frame; points outside the box
    (boundary inclusive) are dropped. Each included point lands in cell
    floor((p/size + 0.5) * r) clamped to [0, r-1], so the top faces are
    inclusive. Per-cell, per-channel max over the assigned points.
    """
    if not resolutions or any(r < 1 for r in resolutions):
        raise ValueError(f"resolutions must be >= 1, got {resolutions}")
    canon = (points.positions - box.center) @ rot_z(-box.heading).T
    inside = np.all(np.abs(canon) <= box.size / 2.0, axis=1)
    channels = points.feature_dim
    unit = canon[inside] / box.size + 0.5  # [0, 1] per axis for kept points
    feats = points.features[inside]
    grids, masks = [], []
    for r in resolutions:
        n_cells = r**3
        grid = np.full((n_cells, channels), -np.inf)
        if unit.shape[0]:
            cell3 = np.clip(np.floor(unit * r).astype(np.int64), 0, r - 1)
            lin = (cell3[:, 0] * r + cell3[:, 1]) * r + cell3[:, 2]
            np.maximum.at(grid, lin, feats)
        mask = np.isfinite(grid[:, 0])
        grid[~mask] = 0.0
        grids.append(grid)
        masks.append(mask)
    return RoIFeature(tuple(resolutions), grids, masks)


def feature_gate(
    roi: RoIFeature,
    proposal_feat: np.ndarray,
    params: GateParams,
    reduction: str = "sum",
) -> np.ndarray:
    """Gate each resolution's grid and reduce everything to one C-vector.

    Per resolution: gate = MLP_r(proposal_feat) in (0, 1), reshaped to
    (r^3, C); the gated grid is reduced over cells ("sum", or "mean" over
    occupied cells) and the reductions are summed across resolutions.
    Empty cells contribute zero regardless of the gate.
    """
    feat = np.asarray(proposal_feat, dtype=np.float64)
    if roi.resolutions != params.resolutions:
        raise ValueError(f"gate built for {params.resolutions}, RoI has {roi.resolutions}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    channels = roi.channels
    out = np.zeros(channels)
    for r, grid, mask, mlp in zip(roi.resolutions, roi.grids, roi.masks, params.mlps):
        gate = mlp_forward(feat, mlp).reshape(r**3, channels)
        gated = gate * grid
        if reduction == "sum":
            out += gated.sum(axis=0)
        elif mask.any():
            out += gated[mask].mean(axis=0)
    return out
