import math

import numpy as np
import pytest

from votedet.geometry import Box3D
from votedet.matching import (
    CostWeights,
    focal_loss,
    focal_loss_grad,
    hungarian,
    iou_aa_loss_grad,
    iou_loss,
    l1_box_loss,
    l1_box_loss_grad,
    match_cost_matrix,
    match_predictions,
    set_loss,
    total_loss,
)
from votedet.geometry import corner_distance
from votedet.tinynet import finite_diff_grad

from conftest import brute_force_assignment


SCALE = np.array([4.0, 4.0, 1.5])


class TestFocalLoss:
    def test_gamma_zero_alpha_one_is_summed_bce(self, rng):
        for _ in range(20):
            logits = rng.uniform(-4, 4, size=6)
            tgt = int(rng.integers(6))
            got = focal_loss(logits, tgt, alpha=1.0, gamma=0.0)
            p = 1.0 / (1.0 + np.exp(-logits))
            t = np.zeros(6)
            t[tgt] = 1.0
            bce = -np.sum(t * np.log(p) + (1 - t) * np.log(1 - p))
            assert got == pytest.approx(bce, rel=1e-9)

    def test_single_class_formula_value(self):
        # p = 0.9, target positive: 0.25 * (0.1)^2 * (-ln 0.9)
        logit = math.log(0.9 / 0.1)
        got = focal_loss(np.array([logit]), 0, alpha=0.25, gamma=2.0)
        assert got == pytest.approx(0.25 * 0.01 * (-math.log(0.9)), rel=1e-9)
        assert got == pytest.approx(2.634e-4, abs=2e-7)

    def test_saturated_correct_logits_vanish(self):
        logits = np.full(5, -40.0)
        logits[2] = 40.0
        assert focal_loss(logits, 2) < 1e-12
        assert focal_loss(np.full(5, -40.0), None) < 1e-12

    def test_background_target(self, rng):
        logits = rng.uniform(-2, 2, 4)
        got = focal_loss(logits, None, alpha=1.0, gamma=0.0)
        p = 1.0 / (1.0 + np.exp(-logits))
        assert got == pytest.approx(-np.sum(np.log(1 - p)), rel=1e-9)

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            focal_loss(np.zeros(3), 3)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(30):
            logits = rng.uniform(-3, 3, 8)
            tgt = int(rng.integers(8)) if rng.uniform() < 0.7 else None
            analytic = focal_loss_grad(logits, tgt)
            fd = finite_diff_grad(lambda x: focal_loss(x, tgt), logits)
            denom = max(float(np.abs(fd).max()), 1e-12)
            assert np.abs(analytic - fd).max() / denom < 1e-4


class TestL1BoxLoss:
    def test_identical_boxes_zero(self, rng):
        box = Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), 0.7)
        assert l1_box_loss(box, box, SCALE) == 0.0

    def test_center_offset_by_scale_contributes_one_per_axis(self):
        a = Box3D(SCALE.copy(), [1, 1, 1], 0.0)
        b = Box3D([0, 0, 0], [1, 1, 1], 0.0)
        # Three center components each contribute exactly 1 before the mean.
        assert l1_box_loss(a, b, SCALE) == pytest.approx(3.0 / 7.0, rel=1e-12)

    def test_matches_hand_formula(self, rng):
        for _ in range(20):
            a = Box3D(rng.uniform(-2, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3))
            b = Box3D(rng.uniform(-2, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3))
            dh = (a.heading - b.heading + math.pi) % (2 * math.pi) - math.pi
            dh = dh if dh != -math.pi else math.pi
            expect = (
                np.abs(a.center - b.center) / SCALE
            ).sum() + (np.abs(a.size - b.size) / SCALE).sum() + abs(dh) / math.pi
            assert l1_box_loss(a, b, SCALE) == pytest.approx(expect / 7.0, rel=1e-12)

    def test_heading_difference_wraps(self):
        a = Box3D([0, 0, 0], [1, 1, 1], math.pi - 0.05)
        b = Box3D([0, 0, 0], [1, 1, 1], -math.pi + 0.05)
        # True angular gap is 0.1, not 2 pi - 0.1.
        assert l1_box_loss(a, b, SCALE) == pytest.approx(0.1 / math.pi / 7.0, rel=1e-9)

    def test_rejects_nonpositive_scale(self):
        box = Box3D([0, 0, 0], [1, 1, 1])
        with pytest.raises(ValueError):
            l1_box_loss(box, box, np.array([1.0, 0.0, 1.0]))

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(30):
            pvec = np.concatenate(
                [rng.uniform(-2, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(-2.5, 2.5, 1)]
            )
            gt = Box3D(rng.uniform(-2, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(-2.5, 2.5))

            def f(x):
                return l1_box_loss(Box3D(x[0:3], x[3:6], x[6]), gt, SCALE)

            analytic = l1_box_loss_grad(Box3D(pvec[0:3], pvec[3:6], pvec[6]), gt, SCALE)
            fd = finite_diff_grad(f, pvec)
            denom = max(float(np.abs(fd).max()), 1e-12)
            assert np.abs(analytic - fd).max() / denom < 1e-4


class TestIoULoss:
    def test_identical_zero(self, rng):
        box = Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), 0.4)
        assert iou_loss(box, box) == pytest.approx(0.0, abs=1e-9)

    def test_disjoint_one(self):
        assert iou_loss(Box3D([0, 0, 0], [1, 1, 1]), Box3D([5, 0, 0], [1, 1, 1])) == 1.0

    def test_half_shift_two_thirds(self):
        a = Box3D([0, 0, 0], [1, 1, 1])
        b = Box3D([0.5, 0, 0], [1, 1, 1])
        assert iou_loss(a, b) == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_oriented_dispatch(self):
        a = Box3D([0, 0, 0], [1, 1, 1], 0.3)
        b = Box3D([0, 0, 0], [1, 1, 1], 0.3)
        assert iou_loss(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_axis_aligned_gradient_matches_finite_differences(self, rng):
        for _ in range(30):
            gt = Box3D(rng.uniform(-0.2, 0.2, 3), rng.uniform(0.8, 1.5, 3), 0.0)
            pvec = np.concatenate(
                [gt.center + rng.uniform(-0.25, 0.25, 3), gt.size * rng.uniform(0.8, 1.2, 3)]
            )

            def f(x):
                return iou_loss(Box3D(x[0:3], x[3:6], 0.0), gt)

            analytic = iou_aa_loss_grad(Box3D(pvec[0:3], pvec[3:6], 0.0), gt)
            fd = finite_diff_grad(f, pvec)
            denom = max(float(np.abs(fd).max()), 1e-12)
            assert np.abs(analytic - fd).max() / denom < 1e-4


class TestCostMatrix:
    def _setup(self, rng, n_pred=5, n_gt=3):
        logits = rng.uniform(-3, 3, (n_pred, 4))
        preds = [
            Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), 0.0) for _ in range(n_pred)
        ]
        gts = [Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), 0.0) for _ in range(n_gt)]
        labels = [int(rng.integers(4)) for _ in range(n_gt)]
        return logits, preds, gts, labels

    def test_zero_weights_zero_matrix(self, rng):
        logits, preds, gts, labels = self._setup(rng)
        w = CostWeights(w_cls=0, w_l1=0, w_iou=0, w_cor=0)
        cost = match_cost_matrix(logits, preds, gts, labels, w, SCALE)
        assert np.all(cost == 0.0)

    def test_perfect_pair_near_zero(self):
        gt = Box3D([0.3, -0.2, 0.1], [1, 1.5, 0.8], 0.0)
        logits = np.full((1, 4), -40.0)
        logits[0, 2] = 40.0
        cost = match_cost_matrix(logits, [gt], [gt], [2], CostWeights(), SCALE)
        assert cost[0, 0] < 1e-9

    def test_default_weights(self):
        w = CostWeights()
        assert (w.w_cls, w.w_l1, w.w_iou, w.w_cor) == (1.5, 0.45, 2.0, 0.25)
        assert (w.focal_alpha, w.focal_gamma) == (0.25, 2.0)

    def test_permutation_consistency(self, rng):
        logits, preds, gts, labels = self._setup(rng)
        cost = match_cost_matrix(logits, preds, gts, labels, CostWeights(), SCALE)
        perm = rng.permutation(len(preds))
        cost_p = match_cost_matrix(
            logits[perm], [preds[i] for i in perm], gts, labels, CostWeights(), SCALE
        )
        np.testing.assert_allclose(cost_p, cost[perm], rtol=1e-12)

    def test_empty_gt_gives_empty_matrix(self, rng):
        logits, preds, _, _ = self._setup(rng, n_gt=0)
        cost = match_cost_matrix(logits, preds, [], [], CostWeights(), SCALE)
        assert cost.shape == (5, 0)

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            CostWeights(w_cls=-1.0)


class TestHungarian:
    def test_diagonal_zero_identity(self):
        cost = np.ones((4, 4)) - np.eye(4)
        res = hungarian(cost)
        assert res.pairs == [(0, 0), (1, 1), (2, 2), (3, 3)]
        assert res.total_cost == 0.0
        assert res.unmatched_preds == []

    def test_two_by_two(self):
        res = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert res.pairs == [(0, 0), (1, 1)]
        assert res.total_cost == 2.0

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            cost = rng.uniform(0, 1, (6, 6))
            assert hungarian(cost).total_cost == pytest.approx(
                brute_force_assignment(cost), abs=1e-12
            )

    def test_rectangular_matches_brute_force(self, rng):
        for _ in range(100):
            cost = rng.uniform(0, 1, (7, 3))
            res = hungarian(cost)
            assert res.total_cost == pytest.approx(brute_force_assignment(cost), abs=1e-12)
            assert len(res.pairs) == 3
            assert len(res.unmatched_preds) == 4

    def test_beats_random_assignments(self, rng):
        for _ in range(100):
            cost = rng.uniform(0, 1, (8, 5))
            best = hungarian(cost).total_cost
            for _ in range(100):
                rows = rng.permutation(8)[:5]
                random_cost = sum(cost[rows[j], j] for j in range(5))
                assert best <= random_cost + 1e-12

    def test_assignment_invariant_to_row_column_shifts(self, rng):
        # Column shifts hit every assignment; row shifts hit every assignment
        # only when all rows are used (square matrix).
        for _ in range(20):
            cost = rng.uniform(0, 1, (6, 4))
            base = hungarian(cost).pairs
            shifted = cost.copy()
            shifted[:, 1] += 1.3
            assert hungarian(shifted).pairs == base
        for _ in range(20):
            cost = rng.uniform(0, 1, (5, 5))
            base = hungarian(cost).pairs
            shifted = cost.copy()
            shifted[2, :] += 0.7
            shifted[:, 3] += 1.3
            assert hungarian(shifted).pairs == base

    def test_lexicographic_tie_break(self):
        # Both pairings cost 2; (0, 1) precedes (1, 0) lexicographically.
        res = hungarian(np.ones((2, 2)))
        assert res.pairs == [(0, 0), (1, 1)]
        # Column 0 prefers the lowest-index row among optimal completions.
        cost = np.array([[1.0, 1.0, 5.0], [1.0, 1.0, 5.0], [1.0, 1.0, 1.0]])
        assert hungarian(cost).pairs == [(0, 0), (1, 1), (2, 2)]

    def test_empty_gt(self):
        res = hungarian(np.zeros((3, 0)))
        assert res.pairs == []
        assert res.unmatched_preds == [0, 1, 2]

    def test_rejects_nonfinite_and_wide(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 1.0], [1.0, 2.0]]))
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))


class TestSetLoss:
    def test_perfect_predictions_vanish(self):
        gts = [Box3D([0, 0, 0], [1, 1, 1], label=1), Box3D([2, 2, 1], [1, 2, 1], label=3)]
        logits = np.full((4, 5), -40.0)
        logits[0, 1] = 40.0
        logits[1, 3] = 40.0
        boxes = [gts[0], gts[1], Box3D([5, 5, 0], [1, 1, 1]), Box3D([6, 6, 0], [1, 1, 1])]
        match = match_predictions(logits, boxes, gts, [1, 3], CostWeights(), SCALE)
        loss = set_loss(logits, boxes, gts, [1, 3], match, CostWeights(), SCALE)
        assert loss < 1e-9

    def test_two_preds_one_gt_hand_sum(self):
        w = CostWeights()
        gt = Box3D([0, 0, 0], [1, 1, 1], label=0)
        pred_boxes = [Box3D([0.1, 0, 0], [1, 1, 1]), Box3D([3, 3, 1], [1, 1, 1])]
        logits = np.array([[1.0, -1.0], [-2.0, 0.5]])
        match = match_predictions(logits, pred_boxes, [gt], [0], w, SCALE)
        got = set_loss(logits, pred_boxes, [gt], [0], match, w, SCALE)
        # Matched pair must be prediction 0 (nearer, higher class-0 score).
        assert match.pairs == [(0, 0)]
        expect = (
            w.w_cls * focal_loss(logits[0], 0, w.focal_alpha, w.focal_gamma)
            + w.w_l1 * l1_box_loss(pred_boxes[0], gt, SCALE)
            + w.w_iou * iou_loss(pred_boxes[0], gt)
            + w.w_cor * corner_distance(pred_boxes[0], gt)
            + w.w_cls * focal_loss(logits[1], None, w.focal_alpha, w.focal_gamma)
        ) / 1.0
        assert got == pytest.approx(expect, rel=1e-12)

    def test_zero_gt_is_pure_background_focal(self, rng):
        w = CostWeights()
        logits = rng.uniform(-2, 2, (6, 3))
        boxes = [Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 1, 3)) for _ in range(6)]
        match = match_predictions(logits, boxes, [], [], w, SCALE)
        got = set_loss(logits, boxes, [], [], match, w, SCALE)
        expect = sum(
            w.w_cls * focal_loss(logits[i], None, w.focal_alpha, w.focal_gamma) for i in range(6)
        )
        assert got == pytest.approx(expect, rel=1e-12)

    def test_nonnegative(self, rng):
        w = CostWeights()
        for _ in range(20):
            logits = rng.uniform(-4, 4, (5, 3))
            boxes = [Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 1.5, 3)) for _ in range(5)]
            gts = [Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 1.5, 3), label=0) for _ in range(2)]
            match = match_predictions(logits, boxes, gts, [0, 0], w, SCALE)
            assert set_loss(logits, boxes, gts, [0, 0], match, w, SCALE) >= 0.0

    def test_normalization_modes(self, rng):
        w = CostWeights()
        logits = rng.uniform(-2, 2, (4, 3))
        boxes = [Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 1, 3)) for _ in range(4)]
        gts = [Box3D([0, 0, 0], [1, 1, 1], label=1), Box3D([1, 1, 1], [1, 1, 1], label=2)]
        match = match_predictions(logits, boxes, gts, [1, 2], w, SCALE)
        by_gt = set_loss(logits, boxes, gts, [1, 2], match, w, SCALE, "gt")
        by_pred = set_loss(logits, boxes, gts, [1, 2], match, w, SCALE, "preds")
        unnorm = set_loss(logits, boxes, gts, [1, 2], match, w, SCALE, "none")
        assert by_gt == pytest.approx(unnorm / 2.0, rel=1e-12)
        assert by_pred == pytest.approx(unnorm / 4.0, rel=1e-12)


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss(0.0, 0.0, [0.0, 0.0]) == 0.0

    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, [3.0, 4.0, 5.0]) == 15.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0.0, [])
