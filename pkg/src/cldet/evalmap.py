"""Mean average precision with 101-point interpolation.

AP per class at one IoU threshold follows the usual detection protocol:
predictions ranked by score, greedy one-to-one matching against ground
truth, precision/recall staircase, interpolated at recalls 0.00..1.00.
Classes without any ground-truth instance are excluded from the mean.
"""

from __future__ import annotations

import numpy as np

from .detector import Box

IOU_THRESHOLDS_5095 = [0.5 + 0.05 * i for i in range(10)]


def _iou(a: Box, b: Box) -> float:
    lx = max(a.left, b.left)
    ty = max(a.top, b.top)
    rx = min(a.right, b.right)
    by = min(a.bottom, b.bottom)
    inter = max(rx - lx, 0.0) * max(by - ty, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def average_precision(
    predictions: dict[int | str, list[Box]],
    ground_truth: dict[int | str, list[Box]],
    class_id: int,
    iou_threshold: float,
) -> float | None:
    """AP for one class; None when the class has no ground truth."""
    gts = {
        img: [b for b in boxes if b.class_id == class_id]
        for img, boxes in ground_truth.items()
    }
    num_gt = sum(len(v) for v in gts.values())
    if num_gt == 0:
        return None

    ranked: list[tuple[float, int | str, Box]] = []
    for img, boxes in predictions.items():
        for b in boxes:
            if b.class_id == class_id:
                ranked.append((b.score or 0.0, img, b))
    if not ranked:
        return 0.0
    ranked.sort(key=lambda t: -t[0])

    matched: dict[int | str, set[int]] = {img: set() for img in gts}
    tp = np.zeros(len(ranked))
    for i, (_score, img, pred) in enumerate(ranked):
        candidates = gts.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(candidates):
            if j in matched.get(img, set()):
                continue
            iou = _iou(pred, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = 1.0
            matched.setdefault(img, set()).add(best_j)

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    # 101-point interpolation: max precision at recall >= r
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def mean_average_precision(
    predictions: dict[int | str, list[Box]],
    ground_truth: dict[int | str, list[Box]],
    class_ids: list[int],
    iou_thresholds: list[float],
) -> float:
    """Mean over classes (and IoU thresholds) of per-class AP.

    Classes missing from the ground truth are skipped; returns 0.0 when no
    class is evaluable.
    """
    per_class: list[float] = []
    for c in class_ids:
        aps = [
            ap
            for t in iou_thresholds
            if (ap := average_precision(predictions, ground_truth, c, t)) is not None
        ]
        if aps:
            per_class.append(float(np.mean(aps)))
    return float(np.mean(per_class)) if per_class else 0.0
