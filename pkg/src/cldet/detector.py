"""Toy anchor-free detector: multi-scale head, DFL decode, post-processing.

The detector predicts, for every grid cell ("anchor point"), Nc class logits
and 4*L regression logits. Each group of L logits is a categorical
distribution over discrete offset bins; the actual offset is the softmax
expectation times the stride. Class scores are sigmoids (multi-label).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torch import Tensor


class ConfigurationError(ValueError):
    """Raised when grid / head geometry is inconsistent."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the anchor grids: one square grid per stride."""

    image_size: int
    strides: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        if self.image_size <= 0:
            raise ConfigurationError("image_size must be positive")
        for s in self.strides:
            if s <= 0 or self.image_size % s != 0:
                raise ConfigurationError(
                    f"stride {s} does not divide image_size {self.image_size}"
                )
        sides = self.grid_sides
        if any(a <= b for a, b in zip(sides, sides[1:])) and len(sides) > 1:
            if list(self.strides) != sorted(self.strides):
                raise ConfigurationError("strides must be sorted ascending")

    @property
    def grid_sides(self) -> tuple[int, ...]:
        return tuple(self.image_size // s for s in self.strides)

    @property
    def total_anchors(self) -> int:
        return sum(s * s for s in self.grid_sides)

    def anchor_points(self) -> tuple[Tensor, Tensor]:
        """Pixel centers of all grid cells, concatenated over scales.

        Returns (points [A, 2], stride_per_anchor [A]).
        """
        pts, strd = [], []
        for stride, side in zip(self.strides, self.grid_sides):
            c = (torch.arange(side, dtype=torch.float32) + 0.5) * stride
            yy, xx = torch.meshgrid(c, c, indexing="ij")
            pts.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1))
            strd.append(torch.full((side * side,), float(stride)))
        return torch.cat(pts), torch.cat(strd)


@dataclass
class DetectorOutput:
    """Raw network output flattened over all scales.

    cls_logits:  [A, Nc]     class logits (sigmoid activation implied)
    dfl_logits:  [A, 4, L]   per-offset bin logits (l, t, r, b order)
    points:      [A, 2]      anchor centers in pixels
    strides:     [A]         stride of the grid each anchor belongs to
    """

    cls_logits: Tensor
    dfl_logits: Tensor
    points: Tensor
    strides: Tensor
    grid: GridSpec

    @property
    def num_classes(self) -> int:
        return self.cls_logits.shape[1]

    @property
    def num_bins(self) -> int:
        return self.dfl_logits.shape[2]

    def validate(self) -> None:
        a = self.grid.total_anchors
        if self.cls_logits.shape[0] != a or self.dfl_logits.shape[0] != a:
            raise ConfigurationError("anchor count does not match grid")
        if not torch.isfinite(self.cls_logits).all() or not torch.isfinite(self.dfl_logits).all():
            raise FloatingPointError("non-finite detector output")

    def detach(self) -> "DetectorOutput":
        return DetectorOutput(
            self.cls_logits.detach(),
            self.dfl_logits.detach(),
            self.points,
            self.strides,
            self.grid,
        )


@dataclass
class Box:
    """Axis-aligned box in pixels, corners (left, top) / (right, bottom)."""

    left: float
    top: float
    right: float
    bottom: float
    class_id: int | None = None
    score: float | None = None

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return self.width > 0 and self.height > 0

    def as_tensor(self) -> Tensor:
        return torch.tensor([self.left, self.top, self.right, self.bottom])


@dataclass
class BoxSet:
    """Decoded detections: boxes with class ids and scores in [0, 1]."""

    boxes: list[Box] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def dfl_expectation(dfl_logits: Tensor) -> Tensor:
    """Softmax expectation over the bin axis (last axis), in grid units."""
    probs = torch.softmax(dfl_logits, dim=-1)
    bins = torch.arange(dfl_logits.shape[-1], dtype=probs.dtype, device=probs.device)
    return (probs * bins).sum(dim=-1)


def dfl_decode(dfl_logits: Tensor, stride: float) -> Tensor:
    """Decode bin logits for one offset into a pixel distance.

    Accepts [..., L] logits; returns [...] offsets = stride * E[bin].
    """
    if not torch.isfinite(torch.as_tensor(dfl_logits)).all():
        raise FloatingPointError("non-finite DFL logits")
    return dfl_expectation(torch.as_tensor(dfl_logits)) * stride


def decode_boxes_tensor(output: DetectorOutput) -> Tensor:
    """Boxes [A, 4] (l, t, r, b corners) for every anchor, clipped to the image.

    Differentiable w.r.t. the DFL logits; one box per anchor regardless of
    image content.
    """
    offsets = dfl_expectation(output.dfl_logits) * output.strides.unsqueeze(-1).to(
        output.dfl_logits.dtype
    )  # [A, 4] in pixels: l, t, r, b
    x, y = output.points[:, 0].to(offsets.dtype), output.points[:, 1].to(offsets.dtype)
    boxes = torch.stack(
        [x - offsets[:, 0], y - offsets[:, 1], x + offsets[:, 2], y + offsets[:, 3]],
        dim=-1,
    )
    return boxes.clamp(min=0.0, max=float(output.grid.image_size))


def decode_boxes(output: DetectorOutput) -> list[Box]:
    """All per-anchor boxes as Box objects (undiscarded)."""
    t = decode_boxes_tensor(output).detach()
    return [Box(*map(float, row)) for row in t]


def box_iou_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise IoU between [N, 4] and [M, 4] corner boxes."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices, highest score first."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep: list[int] = []
    suppressed = torch.zeros(len(boxes), dtype=torch.bool)
    for idx in order.tolist():
        if suppressed[idx]:
            continue
        keep.append(idx)
        ious = box_iou_matrix(boxes[idx : idx + 1], boxes)[0]
        suppressed |= ious > iou_threshold
        suppressed[idx] = True
    return keep


def postprocess(
    output: DetectorOutput,
    score_threshold: float = 0.5,
    nms_iou_threshold: float = 0.7,
) -> BoxSet:
    """Threshold sigmoid scores and run per-class greedy NMS.

    One candidate per (anchor, class) pair above threshold; each class is
    suppressed independently.
    """
    scores = torch.sigmoid(output.cls_logits.detach())
    boxes = decode_boxes_tensor(output).detach()
    result: list[Box] = []
    for c in range(output.num_classes):
        mask = scores[:, c] >= score_threshold
        idxs = mask.nonzero(as_tuple=True)[0]
        if len(idxs) == 0:
            continue
        cand_boxes = boxes[idxs]
        cand_scores = scores[idxs, c]
        for k in nms(cand_boxes, cand_scores, nms_iou_threshold):
            b = cand_boxes[k]
            result.append(
                Box(float(b[0]), float(b[1]), float(b[2]), float(b[3]), c, float(cand_scores[k]))
            )
    result.sort(key=lambda b: -(b.score or 0.0))
    return BoxSet(result)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.GroupNorm(min(8, cout), cout)
        self.act = nn.SiLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class ToyDetector(nn.Module):
    """Small convolutional detector with one head per stride.

    Heads emit Nc + 4*L channels; the spatial layout matches GridSpec so
    flattening yields one prediction vector per anchor point.
    """

    def __init__(
        self,
        grid: GridSpec,
        num_classes: int,
        num_bins: int = 16,
        width: int = 16,
        class_names: list[str] | None = None,
    ):
        super().__init__()
        self.grid = grid
        self.num_classes = num_classes
        self.num_bins = num_bins
        self.width = width
        self.class_names = class_names or [f"class_{i}" for i in range(num_classes)]
        if len(self.class_names) != num_classes:
            raise ConfigurationError("class name count != num_classes")

        # Downsample to the coarsest stride; tap features at each head stride.
        blocks: list[nn.Module] = []
        taps: dict[int, int] = {}
        cin, cur_stride, w = 3, 1, width
        max_stride = max(grid.strides)
        while cur_stride < max_stride:
            blocks.append(ConvBlock(cin, w, stride=2))
            cin, cur_stride = w, cur_stride * 2
            if cur_stride in grid.strides:
                taps[cur_stride] = len(blocks) - 1
            w = min(w * 2, width * 4)
        missing = [s for s in grid.strides if s not in taps]
        if missing:
            raise ConfigurationError(f"strides {missing} are not powers of two reachable by 2x blocks")
        self.backbone = nn.ModuleList(blocks)
        self._taps = taps

        head_out = num_classes + 4 * num_bins
        self.heads = nn.ModuleDict()
        for s in grid.strides:
            cin_s = self.backbone[taps[s]].conv.out_channels
            self.heads[str(s)] = nn.Sequential(
                ConvBlock(cin_s, cin_s), nn.Conv2d(cin_s, head_out, 1)
            )
        # Bias class outputs toward background so early training is stable.
        for head in self.heads.values():
            nn.init.constant_(head[-1].bias[:num_classes], -4.0)

    def forward(self, image: Tensor) -> DetectorOutput:
        """Run the detector on one [3, d, d] image (no batch axis)."""
        if image.dim() != 3 or image.shape[0] != 3 or image.shape[1] != self.grid.image_size:
            raise ConfigurationError(
                f"expected [3, {self.grid.image_size}, {self.grid.image_size}] image, got {tuple(image.shape)}"
            )
        feats: dict[int, Tensor] = {}
        x = image.unsqueeze(0)
        for i, block in enumerate(self.backbone):
            x = block(x)
            for s, tap in self._taps.items():
                if tap == i:
                    feats[s] = x
        cls_parts, dfl_parts = [], []
        for s, side in zip(self.grid.strides, self.grid.grid_sides):
            out = self.heads[str(s)](feats[s])[0]  # [Nc + 4L, side, side]
            if out.shape[-1] != side:
                raise ConfigurationError("head output side mismatch")
            flat = out.reshape(out.shape[0], -1).T  # [side^2, Nc + 4L]
            cls_parts.append(flat[:, : self.num_classes])
            dfl_parts.append(flat[:, self.num_classes :].reshape(-1, 4, self.num_bins))
        points, strides = self.grid.anchor_points()
        return DetectorOutput(
            torch.cat(cls_parts), torch.cat(dfl_parts), points, strides, self.grid
        )

    def save(self, path: str | Path) -> None:
        """Write weights plus a JSON sidecar describing the geometry."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        sidecar = {
            "image_size": self.grid.image_size,
            "strides": list(self.grid.strides),
            "num_classes": self.num_classes,
            "num_bins": self.num_bins,
            "width": self.width,
            "class_names": self.class_names,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ToyDetector":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        model = cls(
            GridSpec(meta["image_size"], tuple(meta["strides"])),
            meta["num_classes"],
            meta["num_bins"],
            meta["width"],
            meta["class_names"],
        )
        model.load_state_dict(torch.load(path, weights_only=True))
        return model
