"""Shared fixtures and independent oracle implementations.

Oracles here deliberately avoid the library's fast paths: Monte-Carlo volume
estimation for IoU, O(n*m) recomputation for FPS, permutation brute force
for assignment, and per-point loops for pooling.
"""

import itertools

import numpy as np
import pytest

from votedet.geometry import Box3D, box_corners, points_in_box
from votedet.tinynet import make_rng


@pytest.fixture
def rng():
    return make_rng(2024, 0)


def random_box(rng, center_span=0.5, size_lo=0.5, size_hi=2.0, oriented=True):
    heading = rng.uniform(-np.pi, np.pi) if oriented else 0.0
    return Box3D(
        rng.uniform(-center_span, center_span, 3),
        rng.uniform(size_lo, size_hi, 3),
        heading,
    )


def mc_iou(a: Box3D, b: Box3D, samples: int, rng) -> float:
    """Monte-Carlo IoU: uniform samples in the joint bounding box."""
    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    union = np.count_nonzero(in_a | in_b)
    return float(np.count_nonzero(in_a & in_b) / union) if union else 0.0


def fps_oracle(points: np.ndarray, n: int, start: int = 0) -> list[int]:
    """Greedy max-min selection recomputed from scratch each step."""
    m = len(points)
    chosen = [start]
    for _ in range(n - 1):
        best_idx, best_d = -1, -1.0
        for i in range(m):
            if i in chosen:
                continue
            d = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_d, best_idx = d, i
        chosen.append(best_idx)
    return chosen


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating all column permutations."""
    n_pred, n_gt = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(n_pred), n_gt):
        total = sum(cost[perm[j], j] for j in range(n_gt))
        best = min(best, total)
    return best
