"""Synthetic shapes benchmark and annotation-file handling.

Images are square canvases with 1..k colored shapes; classes are
(shape, color) combinations. The annotation file is a JSON document with
three tables:

    images:      [{"id": int, "file_name": str, "width": int, "height": int}]
    annotations: [{"id": int, "image_id": int, "category_id": int,
                   "bbox": [left, top, width, height]}]
    categories:  [{"id": int, "name": str}]

Restricting annotations to a task's classes keeps every image: old-class
objects stay visible in the pixels but disappear from the labels, which is
exactly the missing-annotation situation continual training has to survive.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .detector import Box
from .taskloss import GroundTruth

SHAPES = ("circle", "square", "triangle", "star")
COLORS = {"red": (220, 60, 50), "blue": (60, 90, 220)}


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation file."""


@dataclass
class SceneSpec:
    """Recipe for one synthetic split."""

    canvas_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    num_classes: int = 8
    allow_occlusion: bool = True
    min_scale: float = 0.15  # object side as fraction of canvas
    max_scale: float = 0.50
    seed: int = 0

    def __post_init__(self):
        if self.num_classes > len(SHAPES) * len(COLORS):
            raise ValueError("class catalog supports at most 8 classes")
        if int(self.canvas_size * self.min_scale) < 4:
            raise ValueError("canvas too small for the requested object scale")

    def catalog(self) -> list[str]:
        names = [f"{color}_{shape}" for shape in SHAPES for color in COLORS]
        return names[: self.num_classes]


@dataclass
class AnnotationFile:
    images: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        image_ids = [im["id"] for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            dupes = sorted({i for i in image_ids if image_ids.count(i) > 1})
            raise AnnotationError(f"duplicate image ids: {dupes}")
        cat_ids = {c["id"] for c in self.categories}
        sizes = {im["id"]: (im["width"], im["height"]) for im in self.images}
        for a in self.annotations:
            if a["image_id"] not in sizes:
                raise AnnotationError(
                    f"annotation {a['id']} references missing image id {a['image_id']}"
                )
            if a["category_id"] not in cat_ids:
                raise AnnotationError(
                    f"annotation {a['id']} references missing category id {a['category_id']}"
                )
            left, top, w, h = a["bbox"]
            iw, ih = sizes[a["image_id"]]
            if w <= 0 or h <= 0 or left < 0 or top < 0 or left + w > iw or top + h > ih:
                raise AnnotationError(f"annotation {a['id']} box out of bounds: {a['bbox']}")

    def class_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for a in self.annotations:
            hist[a["category_id"]] = hist.get(a["category_id"], 0) + 1
        return hist

    def to_json(self) -> str:
        return json.dumps(
            {
                "images": self.images,
                "annotations": self.annotations,
                "categories": self.categories,
            },
            indent=2,
            sort_keys=True,
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "AnnotationFile":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"not valid JSON: {e}") from e
        for key in ("images", "annotations", "categories"):
            if key not in payload:
                raise AnnotationError(f"missing top-level key: {key}")
        return cls(payload["images"], payload["annotations"], payload["categories"])

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationFile":
        return cls.from_json(Path(path).read_text())


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: tuple[int, int, int, int], color):
    left, top, right, bottom = box
    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "triangle":
        draw.polygon(
            [((left + right) // 2, top), (left, bottom), (right, bottom)], fill=color
        )
    elif shape == "star":
        cx, cy = (left + right) / 2, (top + bottom) / 2
        rx, ry = (right - left) / 2, (bottom - top) / 2
        pts = []
        for i in range(10):
            ang = -math.pi / 2 + i * math.pi / 5
            f = 1.0 if i % 2 == 0 else 0.45
            pts.append((cx + f * rx * math.cos(ang), cy + f * ry * math.sin(ang)))
        draw.polygon(pts, fill=color)
    else:
        raise ValueError(f"unknown shape {shape}")


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _render_image(
    spec: SceneSpec, rng: random.Random, forced_class: int | None
) -> tuple[Image.Image, list[tuple[int, tuple[int, int, int, int]]]]:
    size = spec.canvas_size
    bg = tuple(rng.randint(25, 55) for _ in range(3))
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)
    n = rng.randint(spec.min_objects, spec.max_objects)
    catalog = spec.catalog()
    placed: list[tuple[int, tuple[int, int, int, int]]] = []
    for j in range(n):
        cls = forced_class if (j == 0 and forced_class is not None) else rng.randrange(
            spec.num_classes
        )
        for _attempt in range(30):
            w = rng.randint(int(size * spec.min_scale), int(size * spec.max_scale))
            h = rng.randint(int(size * spec.min_scale), int(size * spec.max_scale))
            left = rng.randint(0, size - w - 1)
            top = rng.randint(0, size - h - 1)
            box = (left, top, left + w, top + h)
            if spec.allow_occlusion or not any(_boxes_overlap(box, b) for _, b in placed):
                break
        else:
            continue
        color_name, shape = catalog[cls].split("_", 1)
        _draw_shape(draw, shape, box, COLORS[color_name])
        placed.append((cls, box))
    return img, placed


def generate_dataset(
    spec: SceneSpec, num_train: int, num_test: int, out_dir: str | Path
) -> dict[str, AnnotationFile]:
    """Write PNGs and full annotation files for both splits.

    Deterministic for a fixed spec seed; per-image seeds are derived so the
    first num_classes images of each split each lead with a distinct class,
    guaranteeing full class coverage.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    catalog = spec.catalog()
    result: dict[str, AnnotationFile] = {}
    for split, count in (("train", num_train), ("test", num_test)):
        if count < spec.num_classes:
            raise ValueError(f"{split} split needs at least {spec.num_classes} images")
        ann = AnnotationFile(
            categories=[{"id": i, "name": n} for i, n in enumerate(catalog)]
        )
        next_ann_id = 0
        for idx in range(count):
            digest = hashlib.sha256(f"{spec.seed}:{split}:{idx}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            forced = idx if idx < spec.num_classes else None
            img, placed = _render_image(spec, rng, forced)
            name = f"{split}_{idx:05d}.png"
            img.save(out_dir / "images" / name)
            ann.images.append(
                {
                    "id": idx,
                    "file_name": name,
                    "width": spec.canvas_size,
                    "height": spec.canvas_size,
                }
            )
            for cls, (left, top, right, bottom) in placed:
                ann.annotations.append(
                    {
                        "id": next_ann_id,
                        "image_id": idx,
                        "category_id": cls,
                        "bbox": [left, top, right - left, bottom - top],
                    }
                )
                next_ann_id += 1
        ann.validate()
        ann.save(out_dir / "annotations" / f"full_{split}.json")
        result[split] = ann
    return result


def filter_annotations_for_task(
    full: AnnotationFile, task_classes: set[int]
) -> AnnotationFile:
    """Drop annotations outside task_classes; keep every image and category."""
    known = {c["id"] for c in full.categories}
    if not task_classes <= known:
        raise AnnotationError(f"unknown task classes: {sorted(task_classes - known)}")
    return AnnotationFile(
        images=list(full.images),
        annotations=[a for a in full.annotations if a["category_id"] in task_classes],
        categories=list(full.categories),
    )


def ingest_external(annotation_path: str | Path, images_root: str | Path) -> AnnotationFile:
    """Load and validate an annotation file produced elsewhere."""
    ann = AnnotationFile.load(annotation_path)
    ann.validate()
    return ann


def load_image(path: str | Path) -> torch.Tensor:
    """PNG -> float tensor [3, h, w] in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def dataset_items(
    ann: AnnotationFile, images_root: str | Path
) -> list[tuple[Path, GroundTruth]]:
    """Pair each image path with its GroundTruth (possibly empty)."""
    images_root = Path(images_root)
    by_image: dict[int, list[Box]] = {im["id"]: [] for im in ann.images}
    for a in ann.annotations:
        left, top, w, h = a["bbox"]
        by_image[a["image_id"]].append(
            Box(left, top, left + w, top + h, class_id=a["category_id"])
        )
    return [
        (images_root / im["file_name"], GroundTruth(by_image[im["id"]], im["id"]))
        for im in ann.images
    ]
