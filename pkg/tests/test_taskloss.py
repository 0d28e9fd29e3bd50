import math

import pytest
import torch

import brute
from cldet.detector import Box, DetectorOutput, GridSpec
from cldet.taskloss import (
    ClassMask,
    GroundTruth,
    assign,
    ciou,
    dfl_loss,
    task_loss,
)


def random_output(num_anchors, num_classes, num_bins, image_size=64, seed=0,
                  dtype=torch.float64, requires_grad=False):
    torch.manual_seed(seed)
    pts = torch.rand(num_anchors, 2, dtype=dtype) * (image_size - 2) + 1
    strides = torch.full((num_anchors,), 8.0, dtype=dtype)
    grid = GridSpec(image_size, (image_size,))
    out = DetectorOutput(
        torch.randn(num_anchors, num_classes, dtype=dtype),
        torch.randn(num_anchors, 4, num_bins, dtype=dtype),
        pts, strides, grid,
    )
    if requires_grad:
        out.cls_logits.requires_grad_(True)
        out.dfl_logits.requires_grad_(True)
    return out


def grid_output(grid, num_classes, num_bins, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    a = grid.total_anchors
    pts, strides = grid.anchor_points()
    return DetectorOutput(
        torch.randn(a, num_classes, dtype=dtype),
        torch.randn(a, 4, num_bins, dtype=dtype),
        pts.to(dtype), strides.to(dtype), grid,
    )


class TestCiou:
    def test_identical_boxes(self):
        b = torch.tensor([1.0, 2.0, 5.0, 7.0])
        assert ciou(b, b).item() == pytest.approx(1.0, abs=1e-6)

    def test_hand_arithmetic_case(self):
        a = torch.tensor([0.0, 0.0, 2.0, 2.0])
        b = torch.tensor([1.0, 1.0, 3.0, 3.0])
        got = ciou(a, b).item()
        # independent scalar computation
        want = brute.ciou_scalar((0, 0, 2, 2), (1, 1, 3, 3))
        assert got == pytest.approx(want, abs=1e-6)
        assert got < 1 / 7  # below plain IoU: penalties are positive
        assert brute.iou_scalar((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_far_apart_is_negative(self):
        a = torch.tensor([0.0, 0.0, 2.0, 2.0])
        b = torch.tensor([50.0, 50.0, 52.0, 52.0])
        assert ciou(a, b).item() < 0

    def test_matches_oracle_on_random_boxes(self):
        torch.manual_seed(1)
        for _ in range(50):
            raw = torch.rand(2, 4, dtype=torch.float64) * 40
            a = torch.cat([raw[0, :2], raw[0, :2] + raw[0, 2:] + 0.5])
            b = torch.cat([raw[1, :2], raw[1, :2] + raw[1, 2:] + 0.5])
            got = ciou(a, b).item()
            want = brute.ciou_scalar(tuple(a.tolist()), tuple(b.tolist()))
            assert got == pytest.approx(want, abs=1e-9)
            assert -1 < got <= 1

    def test_degenerate_box_defined(self):
        a = torch.tensor([5.0, 5.0, 5.0, 9.0])  # zero width
        b = torch.tensor([0.0, 0.0, 4.0, 4.0])
        val = ciou(a, b).item()
        assert math.isfinite(val)


class TestDflLoss:
    def test_one_hot_perfect_prediction(self):
        logits = torch.zeros(4, dtype=torch.float64)
        logits[2] = 50.0
        loss = dfl_loss(logits, torch.tensor(2.0, dtype=torch.float64))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_uniform_midpoint(self):
        loss = dfl_loss(torch.zeros(4, dtype=torch.float64), torch.tensor(1.5, dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_uniform_zero_target(self):
        loss = dfl_loss(torch.zeros(4, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_out_of_range_target_clamped(self):
        logits = torch.randn(6, dtype=torch.float64)
        hi = dfl_loss(logits, torch.tensor(9.5, dtype=torch.float64))
        clamped = dfl_loss(logits, torch.tensor(5.0, dtype=torch.float64))
        assert hi.item() == pytest.approx(clamped.item())

    def test_matches_oracle(self):
        torch.manual_seed(2)
        for _ in range(30):
            logits = torch.randn(8, dtype=torch.float64)
            t = torch.rand((), dtype=torch.float64) * 7
            got = dfl_loss(logits, t).item()
            want = brute.dfl_loss_scalar(logits.tolist(), float(t))
            assert got == pytest.approx(want, abs=1e-10)
            assert got >= 0


class TestAssign:
    def test_single_gt_covering_image_gets_topk(self):
        grid = GridSpec(64, (8,))
        out = grid_output(grid, 3, 4, seed=0)
        gt = GroundTruth([Box(0, 0, 64, 64, class_id=1)])
        a = assign(out, gt, top_k=10)
        assert int((a == 0).sum()) == 10
        assert int((a >= 0).sum()) == 10

    def test_empty_gt_all_background(self):
        grid = GridSpec(64, (8,))
        out = grid_output(grid, 3, 4)
        a = assign(out, GroundTruth([]), top_k=10)
        assert (a == -1).all()

    def test_disjoint_boxes_get_disjoint_anchor_sets(self):
        grid = GridSpec(64, (8,))
        out = grid_output(grid, 3, 4, seed=1)
        g1 = Box(0, 0, 24, 24, class_id=0)
        g2 = Box(40, 40, 64, 64, class_id=2)
        a = assign(out, GroundTruth([g1, g2]), top_k=4)
        pts, _ = grid.anchor_points()
        # derived oracle: enumerate anchor centers and check containment
        for k in (a == 0).nonzero(as_tuple=True)[0].tolist():
            x, y = pts[k].tolist()
            assert 0 < x < 24 and 0 < y < 24
        for k in (a == 1).nonzero(as_tuple=True)[0].tolist():
            x, y = pts[k].tolist()
            assert 40 < x < 64 and 40 < y < 64
        assert (a == 0).any() and (a == 1).any()

    def test_every_covered_gt_keeps_an_anchor(self):
        grid = GridSpec(64, (8,))
        for seed in range(5):
            out = grid_output(grid, 4, 4, seed=seed)
            boxes = [
                Box(4, 4, 30, 30, class_id=0),
                Box(6, 6, 28, 28, class_id=1),  # heavy overlap forces conflicts
                Box(36, 36, 60, 60, class_id=2),
            ]
            a = assign(out, GroundTruth(boxes), top_k=3)
            for g in range(3):
                assert (a == g).any()


def build_case(seed, num_anchors=12, num_classes=4, num_bins=5, masked=frozenset()):
    out = random_output(num_anchors, num_classes, num_bins, seed=seed)
    rng = torch.Generator().manual_seed(seed + 1)
    boxes = []
    for i in range(2):
        xy = torch.rand(2, generator=rng) * 30
        wh = torch.rand(2, generator=rng) * 20 + 8
        cls = int(torch.randint(0, num_classes, (1,), generator=rng))
        if cls in masked:
            cls = min(set(range(num_classes)) - masked)
        boxes.append(Box(float(xy[0]), float(xy[1]), float(xy[0] + wh[0]), float(xy[1] + wh[1]), class_id=cls))
    gt = GroundTruth(boxes)
    mask = ClassMask(frozenset(range(num_classes)) - masked, masked)
    return out, gt, mask


class TestTaskLoss:
    def test_matches_brute_force_oracle(self):
        for seed in range(10):
            out, gt, mask = build_case(seed)
            assignment = assign(out, gt, top_k=4)
            got = task_loss(out, gt, mask, assignment=assignment).item()
            want = brute.task_loss_scalar(
                out.cls_logits.tolist(),
                out.dfl_logits.tolist(),
                out.points.tolist(),
                out.strides.tolist(),
                assignment.tolist(),
                [(b.left, b.top, b.right, b.bottom) for b in gt.boxes],
                [b.class_id for b in gt.boxes],
                sorted(mask.active_classes),
                (7.5, 0.5, 1.5),
                out.grid.image_size,
            )
            assert got == pytest.approx(want, abs=1e-6)
            assert got >= 0

    def test_masked_columns_zero_loss_and_gradient(self):
        out, gt, mask = build_case(3, masked=frozenset({1, 3}))
        out.cls_logits.requires_grad_(True)
        assignment = assign(out, gt, top_k=4)
        loss = task_loss(out, gt, mask, assignment=assignment)
        loss.backward()
        grad = out.cls_logits.grad
        assert torch.all(grad[:, 1] == 0) and torch.all(grad[:, 3] == 0)
        # finite-difference: perturbing a masked logit changes nothing
        with torch.no_grad():
            base = task_loss(out.detach(), gt, mask, assignment=assignment).item()
            bumped = out.detach()
            bumped.cls_logits[5, 1] += 10.0
            after = task_loss(bumped, gt, mask, assignment=assignment).item()
        assert after == base

    def test_empty_gt_background_only(self):
        out = random_output(10, 3, 4, seed=7)
        mask = ClassMask(frozenset({0, 1}), frozenset({2}))
        loss = task_loss(out, GroundTruth([]), mask)
        # background BCE on active columns only
        want = 0.5 * sum(
            brute.bce_with_logit(float(v), 0.0)
            for v in out.cls_logits[:, [0, 1]].reshape(-1)
        ) / 10
        assert loss.item() == pytest.approx(want, abs=1e-9)

    def test_gain_scaling(self):
        out, gt, mask = build_case(4)
        assignment = assign(out, gt, top_k=4)
        base = task_loss(out, gt, mask, gains=(7.5, 0.5, 1.5), assignment=assignment).item()
        scaled = task_loss(out, gt, mask, gains=(22.5, 1.5, 4.5), assignment=assignment).item()
        assert scaled == pytest.approx(3 * base, rel=1e-9)

    def test_gt_outside_active_classes_dropped(self):
        out = random_output(10, 4, 4, seed=9)
        mask = ClassMask(frozenset({0, 1}), frozenset({2, 3}))
        gt_masked = GroundTruth([Box(5, 5, 40, 40, class_id=2)])
        loss_masked = task_loss(out, gt_masked, mask).item()
        loss_empty = task_loss(out, GroundTruth([]), mask).item()
        assert loss_masked == pytest.approx(loss_empty)

    def test_gradient_matches_finite_differences(self):
        out, gt, mask = build_case(11)
        assignment = assign(out, gt, top_k=4)
        out.cls_logits.requires_grad_(True)
        out.dfl_logits.requires_grad_(True)
        loss = task_loss(out, gt, mask, assignment=assignment)
        loss.backward()

        def f(cls_flat, dfl_flat):
            o = DetectorOutput(
                torch.tensor(cls_flat, dtype=torch.float64).reshape(out.cls_logits.shape),
                torch.tensor(dfl_flat, dtype=torch.float64).reshape(out.dfl_logits.shape),
                out.points, out.strides, out.grid,
            )
            return task_loss(o, gt, mask, assignment=assignment).item()

        cls0 = out.cls_logits.detach().reshape(-1).tolist()
        dfl0 = out.dfl_logits.detach().reshape(-1).tolist()
        fd_cls = brute.finite_difference(lambda x: f(x, dfl0), cls0)
        fd_dfl = brute.finite_difference(lambda x: f(cls0, x), dfl0)
        an_cls = out.cls_logits.grad.reshape(-1).tolist()
        an_dfl = out.dfl_logits.grad.reshape(-1).tolist()
        for a, b in zip(an_cls + an_dfl, fd_cls + fd_dfl):
            assert a == pytest.approx(b, rel=1e-4, abs=1e-7)
