"""Supervised detection loss: BCE classification + CIoU + DFL regression.

Classification columns belonging to earlier tasks can be masked out so they
contribute exactly zero loss and zero gradient while their objects sit
unlabeled in current-task images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .detector import Box, DetectorOutput, decode_boxes_tensor


@dataclass
class GroundTruth:
    """Annotated boxes for one image; may be empty."""

    boxes: list[Box] = field(default_factory=list)
    image_id: int | str | None = None


@dataclass(frozen=True)
class ClassMask:
    """Which class columns receive supervision this task."""

    active_classes: frozenset[int]
    masked_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.active_classes & self.masked_classes:
            raise ValueError("active and masked classes overlap")

    @classmethod
    def all_active(cls, num_classes: int) -> "ClassMask":
        return cls(frozenset(range(num_classes)))

    def active_columns(self, num_classes: int) -> Tensor:
        cols = sorted(c for c in self.active_classes if c < num_classes)
        return torch.tensor(cols, dtype=torch.long)


def gt_to_tensor(gt: GroundTruth, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    """(boxes [G, 4], class_ids [G]) from a GroundTruth."""
    if not gt.boxes:
        return torch.zeros(0, 4, dtype=dtype), torch.zeros(0, dtype=torch.long)
    boxes = torch.tensor(
        [[b.left, b.top, b.right, b.bottom] for b in gt.boxes], dtype=dtype
    )
    classes = torch.tensor([b.class_id for b in gt.boxes], dtype=torch.long)
    return boxes, classes


def ciou(box_a: Tensor, box_b: Tensor, eps: float = 1e-9) -> Tensor:
    """Complete IoU between corner boxes [..., 4].

    IoU minus a normalized center-distance penalty and an aspect-ratio
    consistency penalty; 1.0 for identical boxes, negative when far apart.
    Degenerate boxes get IoU 0 but still incur the geometric penalties.
    """
    wa = (box_a[..., 2] - box_a[..., 0]).clamp(min=0)
    ha = (box_a[..., 3] - box_a[..., 1]).clamp(min=0)
    wb = (box_b[..., 2] - box_b[..., 0]).clamp(min=0)
    hb = (box_b[..., 3] - box_b[..., 1]).clamp(min=0)

    lt = torch.maximum(box_a[..., :2], box_b[..., :2])
    rb = torch.minimum(box_a[..., 2:], box_b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = wa * ha + wb * hb - inter
    iou = inter / (union + eps)

    # Smallest enclosing box diagonal vs center distance.
    lt_c = torch.minimum(box_a[..., :2], box_b[..., :2])
    rb_c = torch.maximum(box_a[..., 2:], box_b[..., 2:])
    cwh = (rb_c - lt_c).clamp(min=0)
    c2 = cwh[..., 0] ** 2 + cwh[..., 1] ** 2 + eps
    ctr_a = (box_a[..., :2] + box_a[..., 2:]) / 2
    ctr_b = (box_b[..., :2] + box_b[..., 2:]) / 2
    rho2 = ((ctr_a - ctr_b) ** 2).sum(dim=-1)

    v = (4 / math.pi**2) * (
        torch.atan(wb / (hb + eps)) - torch.atan(wa / (ha + eps))
    ) ** 2
    alpha = v / (1 - iou + v + eps)
    return iou - rho2 / c2 - alpha * v


def dfl_loss(dfl_logits: Tensor, target_offset: Tensor) -> Tensor:
    """Distribution focal loss for one or more offsets.

    dfl_logits [..., L]; target_offset [...] in grid units. The target mass
    is split linearly between the two neighbouring integer bins. Targets
    outside [0, L-1] are clamped.
    """
    num_bins = dfl_logits.shape[-1]
    t = target_offset.clamp(0.0, float(num_bins - 1))
    lo = t.floor().long().clamp(max=num_bins - 2)
    hi = lo + 1
    w_hi = t - lo.to(t.dtype)
    w_lo = 1.0 - w_hi
    logp = torch.log_softmax(dfl_logits, dim=-1)
    loss = -(
        w_lo * logp.gather(-1, lo.unsqueeze(-1)).squeeze(-1)
        + w_hi * logp.gather(-1, hi.unsqueeze(-1)).squeeze(-1)
    )
    return loss


def assign(
    output: DetectorOutput,
    gt: GroundTruth,
    top_k: int = 10,
    mask: ClassMask | None = None,
) -> Tensor:
    """Map each anchor to a ground-truth index or -1 (background).

    Candidates for a gt box are the anchors whose centers lie inside it.
    Alignment metric = sigmoid(class logit for the gt class) * IoU of the
    decoded box with the gt box; each gt keeps its top_k candidates, and an
    anchor claimed by several boxes goes to the one where it aligns best
    (ties to the lower gt index). A gt that loses all its candidates to
    conflicts gets its single best one back.
    """
    num_anchors = output.cls_logits.shape[0]
    result = torch.full((num_anchors,), -1, dtype=torch.long)
    gt_boxes, gt_classes = gt_to_tensor(gt, dtype=output.cls_logits.dtype)
    if len(gt_boxes) == 0:
        return result

    with torch.no_grad():
        pred_boxes = decode_boxes_tensor(output)
        scores = torch.sigmoid(output.cls_logits)
        px, py = output.points[:, 0], output.points[:, 1]

        metric = torch.zeros(len(gt_boxes), num_anchors, dtype=scores.dtype)
        candidate = torch.zeros(len(gt_boxes), num_anchors, dtype=torch.bool)
        for g, (gbox, gcls) in enumerate(zip(gt_boxes, gt_classes)):
            inside = (
                (px > gbox[0]) & (px < gbox[2]) & (py > gbox[1]) & (py < gbox[3])
            )
            if not inside.any():
                continue
            from .detector import box_iou_matrix

            iou = box_iou_matrix(pred_boxes, gbox.unsqueeze(0))[:, 0]
            m = scores[:, gcls] * iou
            # top_k among candidates, stable under ties via anchor index
            idxs = inside.nonzero(as_tuple=True)[0]
            order = sorted(idxs.tolist(), key=lambda i: (-float(m[i]), i))[:top_k]
            for i in order:
                candidate[g, i] = True
                metric[g, i] = m[i]

        best_metric = torch.full((num_anchors,), -1.0, dtype=scores.dtype)
        for g in range(len(gt_boxes)):
            sel = candidate[g] & (metric[g] > best_metric)
            result[sel] = g
            best_metric[sel] = metric[g][sel]

        # guarantee: every gt with candidates keeps at least one anchor
        for g in range(len(gt_boxes)):
            if candidate[g].any() and not (result == g).any():
                idxs = candidate[g].nonzero(as_tuple=True)[0]
                best = min(idxs.tolist(), key=lambda i: (-float(metric[g, i]), i))
                result[best] = g
    return result


def task_loss(
    output: DetectorOutput,
    gt: GroundTruth,
    mask: ClassMask,
    gains: tuple[float, float, float] = (7.5, 0.5, 1.5),
    assignment: Tensor | None = None,
    top_k: int = 10,
) -> Tensor:
    """Weighted BCE + CIoU + DFL over assigned anchors.

    gains = (box, cls, dfl). The classification term is summed over active
    class columns only and divided by the anchor count; regression terms are
    averaged over assigned anchors. Masked columns contribute exactly zero.
    """
    box_gain, cls_gain, dfl_gain = gains
    num_anchors, num_classes = output.cls_logits.shape
    dtype = output.cls_logits.dtype
    active = [b for b in gt.boxes if b.class_id in mask.active_classes]
    gt = GroundTruth(active, gt.image_id)
    if assignment is None:
        assignment = assign(output, gt, top_k=top_k, mask=mask)

    gt_boxes, gt_classes = gt_to_tensor(gt, dtype=dtype)

    # classification: per-anchor binary targets on active columns
    targets = torch.zeros(num_anchors, num_classes, dtype=dtype)
    fg = assignment >= 0
    if fg.any():
        targets[fg, gt_classes[assignment[fg]]] = 1.0
    cols = mask.active_columns(num_classes)
    if len(cols) > 0:
        bce = torch.nn.functional.binary_cross_entropy_with_logits(
            output.cls_logits[:, cols], targets[:, cols], reduction="sum"
        )
        cls_term = bce / num_anchors
    else:
        cls_term = output.cls_logits.sum() * 0.0

    # regression: CIoU on decoded boxes + DFL on binned offsets
    if fg.any():
        pred_boxes = decode_boxes_tensor(output)[fg]
        tgt_boxes = gt_boxes[assignment[fg]]
        box_term = (1.0 - ciou(pred_boxes, tgt_boxes)).mean()

        pts = output.points[fg].to(dtype)
        strides = output.strides[fg].to(dtype)
        # target offsets (l, t, r, b) in grid units
        off = torch.stack(
            [
                pts[:, 0] - tgt_boxes[:, 0],
                pts[:, 1] - tgt_boxes[:, 1],
                tgt_boxes[:, 2] - pts[:, 0],
                tgt_boxes[:, 3] - pts[:, 1],
            ],
            dim=-1,
        ) / strides.unsqueeze(-1)
        dfl_term = dfl_loss(output.dfl_logits[fg], off).mean()
    else:
        box_term = output.dfl_logits.sum() * 0.0
        dfl_term = output.dfl_logits.sum() * 0.0

    return box_gain * box_term + cls_gain * cls_term + dfl_gain * dfl_term
