"""Output distillation losses for continual training.

Three families:
  * the weighted self-distillation pair (tempered cross-entropy on the
    regression distributions gated by teacher objectness, plus soft-target
    BCE on the class logits gated by 1 - IoU of the decoded box pairs),
  * plain L2 distillation over the raw output,
  * the elastic-response baseline (L2 at the classification head, tempered
    KL at the regression head, over statistically selected anchors).

Teacher quantities, gates and weights are constants for backpropagation:
gradient flows only through student logits.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import torch
from torch import Tensor

from .detector import (
    ConfigurationError,
    DetectorOutput,
    ToyDetector,
    decode_boxes_tensor,
)


@dataclass
class DistillConfig:
    """Hyper-parameters and ablation toggles for the self-distillation loss."""

    temperature: float = 2.0
    beta1: float = 4000.0
    beta2: float = 500.0
    use_ce: bool = True       # tempered CE (vs L2) on regression distributions
    use_wce: bool = True      # objectness weighting of the regression term
    use_cls_iou: bool = True  # 1 - IoU gating of the classification term

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta weights must be non-negative")


class TeacherSnapshot:
    """Frozen copy of a detector taken at a task boundary."""

    def __init__(self, model: ToyDetector, task_index: int):
        self.model = copy.deepcopy(model).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.task_index = task_index
        self.grid = self.model.grid
        self.num_classes = self.model.num_classes
        self.num_bins = self.model.num_bins

    @torch.no_grad()
    def forward(self, image: Tensor) -> DetectorOutput:
        return self.model(image)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.numpy().tobytes())
        return h.hexdigest()


def _check_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def objectness_weight(teacher_cls_logits: Tensor) -> Tensor:
    """Max sigmoid class score per anchor: confidence that any object is there.

    Accepts [..., Nc]; returns [...] in [0, 1].
    """
    return torch.sigmoid(teacher_cls_logits.detach()).max(dim=-1).values


def lwf_reg_loss(
    student_dfl: Tensor,
    teacher_dfl: Tensor,
    weights: Tensor | None = None,
    temperature: float = 2.0,
) -> Tensor:
    """Weighted tempered cross-entropy over the offset distributions.

    student_dfl / teacher_dfl: [A, 4, L] logits; weights: [A] in [0, 1]
    (all-ones when None). Both distributions are softened by the same
    temperature; the result is the mean over (anchor, offset) pairs of
    w_k * H(teacher, student).
    """
    _check_shapes(student_dfl, teacher_dfl)
    p_t = torch.softmax(teacher_dfl.detach() / temperature, dim=-1)
    logq_s = torch.log_softmax(student_dfl / temperature, dim=-1)
    ce = -(p_t * logq_s).sum(dim=-1)  # [A, 4]
    if weights is not None:
        ce = ce * weights.detach().unsqueeze(-1)
    return ce.mean()


def l2_reg_loss(
    student_dfl: Tensor, teacher_dfl: Tensor, weights: Tensor | None = None
) -> Tensor:
    """Ablation alternative: mean squared logit difference per (anchor, offset)."""
    _check_shapes(student_dfl, teacher_dfl)
    sq = ((student_dfl - teacher_dfl.detach()) ** 2).mean(dim=-1)  # [A, 4]
    if weights is not None:
        sq = sq * weights.detach().unsqueeze(-1)
    return sq.mean()


def iou_gate(student_boxes: Tensor, teacher_boxes: Tensor) -> Tensor:
    """v = 1 - IoU per anchor for [A, 4] corner boxes decoded from both heads.

    Zero only where the boxes coincide; degenerate boxes have IoU 0 and
    therefore gate at 1.
    """
    _check_shapes(student_boxes, teacher_boxes)
    iou = _diag_iou(student_boxes.detach(), teacher_boxes.detach())
    return (1.0 - iou).clamp(0.0, 1.0)


def _diag_iou(a: Tensor, b: Tensor) -> Tensor:
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def lwf_cls_loss(
    student_cls: Tensor, teacher_cls: Tensor, v: Tensor | None = None
) -> Tensor:
    """Soft-target BCE between class logits, gated per anchor.

    Target = sigmoid(teacher logit); mean over (anchor, class) of
    v_k * BCE(target, sigmoid(student logit)).
    """
    _check_shapes(student_cls, teacher_cls)
    target = torch.sigmoid(teacher_cls.detach())
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        student_cls, target, reduction="none"
    )  # [A, Nc]
    if v is not None:
        bce = bce * v.detach().unsqueeze(-1)
    return bce.mean()


def yolo_lwf_total(
    student_out: DetectorOutput,
    teacher_out: DetectorOutput,
    cfg: DistillConfig,
) -> Tensor:
    """beta1 * regression distillation + beta2 * classification distillation.

    Toggles: use_wce selects objectness weights (else all-ones), use_ce
    selects tempered CE (else L2 on the regression logits), use_cls_iou
    selects the 1 - IoU gate (else all-ones). The supervised task term is
    added by the trainer, not here.
    """
    if student_out.grid != teacher_out.grid:
        raise ConfigurationError("student and teacher grids differ")
    _check_shapes(student_out.cls_logits, teacher_out.cls_logits)

    w = objectness_weight(teacher_out.cls_logits) if cfg.use_wce else None
    if cfg.use_ce:
        reg = lwf_reg_loss(
            student_out.dfl_logits, teacher_out.dfl_logits, w, cfg.temperature
        )
    else:
        reg = l2_reg_loss(student_out.dfl_logits, teacher_out.dfl_logits, w)

    if cfg.use_cls_iou:
        with torch.no_grad():
            v = iou_gate(
                decode_boxes_tensor(student_out), decode_boxes_tensor(teacher_out)
            )
    else:
        v = None
    cls = lwf_cls_loss(student_out.cls_logits, teacher_out.cls_logits, v)
    return cfg.beta1 * reg + cfg.beta2 * cls


def vanilla_lwf_loss(
    student_out: DetectorOutput, teacher_out: DetectorOutput, lam: float = 1.0
) -> Tensor:
    """lam * mean squared difference over the entire raw output."""
    _check_shapes(student_out.cls_logits, teacher_out.cls_logits)
    _check_shapes(student_out.dfl_logits, teacher_out.dfl_logits)
    s = torch.cat([student_out.cls_logits.reshape(-1), student_out.dfl_logits.reshape(-1)])
    t = torch.cat([teacher_out.cls_logits.reshape(-1), teacher_out.dfl_logits.reshape(-1)])
    return lam * ((s - t.detach()) ** 2).mean()


def erd_select(
    teacher_out: DetectorOutput, alpha1: float, alpha2: float, t: float
) -> tuple[Tensor, Tensor]:
    """Anchor selection masks (classification, regression).

    An anchor passes the classification head if its max teacher class score
    exceeds mean + alpha1 * std of that statistic over all anchors; it
    passes the regression head if its mean top bin probability (softmax at
    temperature t, averaged over the four offsets) exceeds mean + alpha2 * std.
    """
    with torch.no_grad():
        cls_stat = torch.sigmoid(teacher_out.cls_logits).max(dim=-1).values
        sel_cls = cls_stat > cls_stat.mean() + alpha1 * cls_stat.std()
        reg_stat = (
            torch.softmax(teacher_out.dfl_logits / t, dim=-1).max(dim=-1).values.mean(dim=-1)
        )
        sel_reg = reg_stat > reg_stat.mean() + alpha2 * reg_stat.std()
    return sel_cls, sel_reg


def erd_loss(
    student_out: DetectorOutput,
    teacher_out: DetectorOutput,
    alpha1: float = 2.0,
    alpha2: float = 2.0,
    lambda1: float = 0.01,
    lambda2: float = 1.0,
    t: float = 1.0,
    tau_kl: float = 10.0,
) -> Tensor:
    """Elastic-response baseline: selective L2 (cls) + tempered KL (reg).

    Classification: mean squared logit difference over anchors selected at
    the classification head. Regression: KL(teacher || student) with both
    distributions tempered by tau_kl, averaged over (selected anchor,
    offset) pairs. Empty selections contribute zero.
    """
    if student_out.grid != teacher_out.grid:
        raise ConfigurationError("student and teacher grids differ")
    _check_shapes(student_out.cls_logits, teacher_out.cls_logits)
    sel_cls, sel_reg = erd_select(teacher_out, alpha1, alpha2, t)

    zero = student_out.cls_logits.sum() * 0.0
    if sel_cls.any():
        diff = student_out.cls_logits[sel_cls] - teacher_out.cls_logits.detach()[sel_cls]
        cls_term = (diff**2).mean()
    else:
        cls_term = zero
    if sel_reg.any():
        p_t = torch.softmax(teacher_out.dfl_logits.detach()[sel_reg] / tau_kl, dim=-1)
        logq_s = torch.log_softmax(student_out.dfl_logits[sel_reg] / tau_kl, dim=-1)
        kl = (p_t * (torch.log(p_t.clamp(min=1e-12)) - logq_s)).sum(dim=-1)
        reg_term = kl.mean()
    else:
        reg_term = zero
    return lambda1 * cls_term + lambda2 * reg_term
