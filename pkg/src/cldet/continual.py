"""Scenario construction, per-task training, evaluation and sensitivity math.

A scenario "NpM" gives the first task N classes and every later task M; the
trainer walks the task list, snapshotting the model as teacher at each
boundary, optionally mixing in replay batches (distillation only, labels
ignored) and updating the class-balanced memory once per task.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import AnnotationFile, dataset_items, filter_annotations_for_task, load_image
from .detector import Box, GridSpec, ToyDetector, postprocess
from .distill import DistillConfig, TeacherSnapshot, erd_loss, vanilla_lwf_loss, yolo_lwf_total
from .evalmap import IOU_THRESHOLDS_5095, mean_average_precision
from .replay import MemorySample, ReplayMemory, ocdm_update, sample_batch
from .taskloss import ClassMask, GroundTruth, task_loss


@dataclass(frozen=True)
class TaskSchedule:
    class_order: tuple[int, ...]
    first_task_size: int
    step_size: int
    tasks: tuple[tuple[int, ...], ...]
    leftover: tuple[int, ...] = ()

    def seen_before(self, task_index: int) -> set[int]:
        """Classes introduced strictly before task_index (0-based)."""
        out: set[int] = set()
        for t in self.tasks[:task_index]:
            out |= set(t)
        return out


def build_schedule(
    num_classes: int,
    first_task_size: int,
    step_size: int,
    class_order: list[int] | None = None,
) -> TaskSchedule:
    """Partition classes into one task of N then tasks of M each.

    Trailing classes that do not fill a whole step are excluded and reported
    in `leftover`.
    """
    if first_task_size < 1 or step_size < 1:
        raise ValueError("N and M must be >= 1")
    if first_task_size > num_classes:
        raise ValueError("first task larger than the class count")
    order = list(class_order) if class_order is not None else list(range(num_classes))
    if sorted(order) != list(range(num_classes)):
        raise ValueError("class_order must be a permutation of range(num_classes)")
    tasks = [tuple(order[:first_task_size])]
    pos = first_task_size
    while pos + step_size <= num_classes:
        tasks.append(tuple(order[pos : pos + step_size]))
        pos += step_size
    return TaskSchedule(
        tuple(order), first_task_size, step_size, tuple(tasks), tuple(order[pos:])
    )


def parse_scenario(text: str) -> tuple[int, int]:
    """'15p1' -> (15, 1)."""
    try:
        n, m = text.lower().split("p")
        return int(n), int(m)
    except ValueError as e:
        raise ValueError(f"scenario must look like '15p1', got {text!r}") from e


@dataclass
class MethodConfig:
    """One continual-learning method: which losses, which masking, replay?"""

    name: str
    distill_kind: str = "none"  # none | vanilla | yolo | erd
    use_mask: bool = True
    use_memory: bool = False
    distill: DistillConfig = field(default_factory=DistillConfig)
    vanilla_lambda: float = 1.0
    erd_params: dict = field(
        default_factory=lambda: {
            "alpha1": 2.0,
            "alpha2": 2.0,
            "lambda1": 0.01,
            "lambda2": 1.0,
            "t": 1.0,
            "tau_kl": 10.0,
        }
    )


METHOD_NAMES = (
    "finetune",
    "lwf",
    "lwf+ocdm",
    "erd",
    "erd+ocdm",
    "yolo-lwf",
    "yolo-lwf+ocdm",
)


def method_from_name(name: str, distill: DistillConfig | None = None) -> MethodConfig:
    distill = distill or DistillConfig()
    base = name.replace("+ocdm", "")
    use_memory = name.endswith("+ocdm")
    if base == "finetune":
        if use_memory:
            raise ValueError("finetune has no replay variant")
        return MethodConfig("finetune", "none", use_mask=False)
    if base == "lwf":
        return MethodConfig(name, "vanilla", use_mask=False, use_memory=use_memory)
    if base == "erd":
        return MethodConfig(name, "erd", use_mask=False, use_memory=use_memory)
    if base == "yolo-lwf":
        return MethodConfig(name, "yolo", use_mask=True, use_memory=use_memory, distill=distill)
    raise ValueError(f"unknown method {name!r}; valid: {', '.join(METHOD_NAMES)}")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr0: float = 1e-2
    lr_final: float = 1e-4
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: int = 3
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    gains: tuple[float, float, float] = (7.5, 0.5, 1.5)
    top_k: int = 10
    augment: bool = True
    replay_batch_ratio: float = 1.0  # replay batch size relative to task batch


@dataclass
class EvalEntry:
    """One row of an evaluation report: mAP split old/new/all."""

    task_index: int
    method: str
    seed: int
    old_map: float
    new_map: float
    all_map: float
    metric: str = "map50"


def _augment(image: torch.Tensor, gt: GroundTruth, rng: random.Random) -> tuple[torch.Tensor, GroundTruth]:
    """Horizontal flip and small integer translation, applied to boxes too."""
    _, h, w = image.shape
    if rng.random() < 0.5:
        image = torch.flip(image, dims=[2])
        gt = GroundTruth(
            [Box(w - b.right, b.top, w - b.left, b.bottom, b.class_id, b.score) for b in gt.boxes],
            gt.image_id,
        )
    max_shift = max(1, int(0.1 * w))
    dx = rng.randint(-max_shift, max_shift)
    dy = rng.randint(-max_shift, max_shift)
    if dx or dy:
        shifted = image.mean(dim=(1, 2), keepdim=True).expand_as(image).clone()
        src_x = slice(max(0, -dx), w - max(0, dx))
        src_y = slice(max(0, -dy), h - max(0, dy))
        dst_x = slice(max(0, dx), w - max(0, -dx))
        dst_y = slice(max(0, dy), h - max(0, -dy))
        shifted[:, dst_y, dst_x] = image[:, src_y, src_x]
        image = shifted
        boxes = []
        for b in gt.boxes:
            nb = Box(
                min(max(b.left + dx, 0), w),
                min(max(b.top + dy, 0), h),
                min(max(b.right + dx, 0), w),
                min(max(b.bottom + dy, 0), h),
                b.class_id,
                b.score,
            )
            # keep a box only while most of the object stays visible
            if nb.is_valid() and nb.area >= 0.5 * b.area:
                boxes.append(nb)
        gt = GroundTruth(boxes, gt.image_id)
    return image, gt


class ImageCache:
    """Keeps decoded image tensors in memory; the desk-scale sets are tiny."""

    def __init__(self):
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, path) -> torch.Tensor:
        key = str(path)
        if key not in self._cache:
            self._cache[key] = load_image(path)
        return self._cache[key]


def _distill_term(
    method: MethodConfig,
    student_out,
    teacher_out,
) -> torch.Tensor:
    if method.distill_kind == "vanilla":
        return vanilla_lwf_loss(student_out, teacher_out, method.vanilla_lambda)
    if method.distill_kind == "yolo":
        return yolo_lwf_total(student_out, teacher_out, method.distill)
    if method.distill_kind == "erd":
        return erd_loss(student_out, teacher_out, **method.erd_params)
    return student_out.cls_logits.sum() * 0.0


def train_task(
    model: ToyDetector,
    teacher: TeacherSnapshot | None,
    task_items: list[tuple[Path, GroundTruth]],
    memory: ReplayMemory | None,
    method: MethodConfig,
    cfg: TrainConfig,
    mask: ClassMask,
    seed: int = 0,
    cache: ImageCache | None = None,
) -> dict:
    """Optimize the model on one task; returns per-epoch loss logs.

    Current-task images contribute the supervised loss (classification
    restricted by `mask`) plus the method's distillation term; replay images
    contribute distillation only. The teacher is never updated.
    """
    if teacher is not None and (
        teacher.grid != model.grid or teacher.num_classes != model.num_classes
    ):
        raise ValueError("teacher and student geometry differ")
    torch.manual_seed(seed)
    rng = random.Random(seed)
    cache = cache or ImageCache()

    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    opt = torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0, "is_bias": True},
        ],
        lr=cfg.lr0,
        momentum=cfg.momentum,
    )

    steps_per_epoch = max(1, (len(task_items) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    replay_k = int(round(cfg.batch_size * cfg.replay_batch_ratio))

    logs = {"epoch_loss": [], "epoch_task_loss": [], "epoch_distill_loss": []}
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = list(range(len(task_items)))
        rng.shuffle(order)
        ep_total = ep_task = ep_dist = 0.0
        for start in range(0, len(order), cfg.batch_size):
            frac = step / max(1, total_steps - 1)
            lr = cfg.lr0 + (cfg.lr_final - cfg.lr0) * frac
            if step < warmup_steps:
                wf = step / max(1, warmup_steps)
                lr_w = lr * wf
                lr_b = cfg.warmup_bias_lr + (lr - cfg.warmup_bias_lr) * wf
                mom = cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * wf
            else:
                lr_w = lr_b = lr
                mom = cfg.momentum
            for group in opt.param_groups:
                group["lr"] = lr_b if group.get("is_bias") else lr_w
                group["momentum"] = mom

            batch = [task_items[i] for i in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            t_loss = torch.zeros(())
            d_loss = torch.zeros(())
            for path, gt in batch:
                image = cache.get(path)
                if cfg.augment:
                    image, gt = _augment(image, gt, rng)
                out = model(image)
                t_loss = t_loss + task_loss(out, gt, mask, cfg.gains, top_k=cfg.top_k)
                if teacher is not None and method.distill_kind != "none":
                    with torch.no_grad():
                        t_out = teacher.forward(image)
                    d_loss = d_loss + _distill_term(method, out, t_out)
            n_replay = 0
            if (
                memory is not None
                and len(memory) > 0
                and teacher is not None
                and method.use_memory
                and replay_k > 0
            ):
                for ms in sample_batch(memory, replay_k, rng_seed=rng.randrange(2**31)):
                    image = cache.get(ms.image_ref)
                    if cfg.augment:
                        image, _ = _augment(image, GroundTruth([]), rng)
                    out = model(image)
                    with torch.no_grad():
                        t_out = teacher.forward(image)
                    d_loss = d_loss + _distill_term(method, out, t_out)
                    n_replay += 1
            loss = (t_loss + d_loss) / (len(batch) + n_replay)
            loss.backward()
            opt.step()
            step += 1
            ep_total += float(loss.detach())
            ep_task += float(t_loss.detach()) / (len(batch) + n_replay)
            ep_dist += float(d_loss.detach()) / (len(batch) + n_replay)
        logs["epoch_loss"].append(ep_total / steps_per_epoch)
        logs["epoch_task_loss"].append(ep_task / steps_per_epoch)
        logs["epoch_distill_loss"].append(ep_dist / steps_per_epoch)
    model.eval()
    return logs


@torch.no_grad()
def evaluate(
    model: ToyDetector,
    test_items: list[tuple[Path, GroundTruth]],
    class_split: tuple[set[int], set[int]],
    metric: str = "map50",
    score_threshold: float = 0.05,
    nms_iou: float = 0.7,
    cache: ImageCache | None = None,
) -> tuple[float, float, float]:
    """(old mAP, new mAP, all mAP); 'all' is over the union of the splits.

    Evaluation is never masked: the full test annotations are used.
    """
    old_set, new_set = class_split
    thresholds = [0.5] if metric == "map50" else IOU_THRESHOLDS_5095
    cache = cache or ImageCache()
    model.eval()
    predictions: dict = {}
    ground_truth: dict = {}
    for path, gt in test_items:
        out = model(cache.get(path))
        predictions[gt.image_id] = list(postprocess(out, score_threshold, nms_iou))
        ground_truth[gt.image_id] = gt.boxes
    def m(classes: set[int]) -> float:
        return mean_average_precision(predictions, ground_truth, sorted(classes), thresholds)
    return m(old_set), m(new_set), m(old_set | new_set)


def sensitivity_delta_percent(map_m1: float, map_m2: float) -> float:
    """Relative drop (%) when the memory shrinks: (m1 - m2) / m1 * 100."""
    if map_m1 == 0:
        raise ZeroDivisionError("reference mAP is zero; delta undefined")
    return (map_m1 - map_m2) / map_m1 * 100.0


def _samples_from_items(
    items: list[tuple[Path, GroundTruth]],
    seen_classes: set[int],
    task_index: int,
) -> list[MemorySample]:
    out = []
    for path, gt in items:
        hist: dict[int, int] = {}
        for b in gt.boxes:
            if b.class_id in seen_classes:
                hist[b.class_id] = hist.get(b.class_id, 0) + 1
        out.append(MemorySample(str(path), hist, task_index))
    return out


@dataclass
class ScenarioResult:
    entries: list[EvalEntry]
    logs: list[dict]

    def final(self) -> EvalEntry:
        return self.entries[-1]


def run_scenario(
    train_ann: AnnotationFile,
    test_ann: AnnotationFile,
    images_root: str | Path,
    schedule: TaskSchedule,
    method: MethodConfig,
    grid: GridSpec,
    num_bins: int,
    width: int,
    train_cfg: TrainConfig,
    seed: int = 0,
    memory_capacity: int = 0,
    metric: str = "map50",
    checkpoint_dir: str | Path | None = None,
    first_task_checkpoint: str | Path | None = None,
) -> ScenarioResult:
    """Run one method through the full task stream and evaluate per boundary.

    The memory (when enabled) is rebuilt greedily once per task boundary
    with the whole task's images as candidates; its histograms use the
    original annotations over all classes seen so far, but training never
    reads them.

    first_task_checkpoint warm-starts the stream from a saved model and
    skips training on the first task. Before any teacher or memory exists
    the first task is method-independent, so a checkpoint trained once can
    be shared across method comparisons on the same seed.
    """
    torch.manual_seed(seed)
    num_classes = len(train_ann.categories)
    class_names = [c["name"] for c in sorted(train_ann.categories, key=lambda c: c["id"])]
    model = ToyDetector(grid, num_classes, num_bins, width, class_names)
    cache = ImageCache()
    test_items = dataset_items(test_ann, images_root)
    memory = ReplayMemory(memory_capacity) if method.use_memory else None
    teacher: TeacherSnapshot | None = None

    entries: list[EvalEntry] = []
    all_logs: list[dict] = []
    for ti, task_classes in enumerate(schedule.tasks):
        task_set = set(task_classes)
        seen_before = schedule.seen_before(ti)
        task_ann = filter_annotations_for_task(train_ann, task_set)
        task_items = [
            (p, g) for p, g in dataset_items(task_ann, images_root) if g.boxes
        ]
        if method.use_mask and teacher is not None:
            mask = ClassMask(
                frozenset(range(num_classes)) - frozenset(seen_before),
                frozenset(seen_before),
            )
        else:
            mask = ClassMask.all_active(num_classes)
        if ti == 0 and first_task_checkpoint is not None:
            loaded = ToyDetector.load(first_task_checkpoint)
            model.load_state_dict(loaded.state_dict())
            logs = {"epoch_loss": [], "warm_start": str(first_task_checkpoint)}
        else:
            logs = train_task(
                model,
                teacher,
                task_items,
                memory,
                method,
                train_cfg,
                mask,
                seed=seed + ti,
                cache=cache,
            )
        all_logs.append(logs)

        seen_now = seen_before | task_set
        old, new, allm = evaluate(
            model, test_items, (seen_before, task_set), metric, cache=cache
        )
        entries.append(EvalEntry(ti, method.name, seed, old, new, allm, metric))

        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"task{ti}.pt")
        teacher = TeacherSnapshot(model, ti)
        if memory is not None:
            memory = ocdm_update(
                memory, _samples_from_items(task_items, seen_now, ti)
            )
    return ScenarioResult(entries, all_logs)


def write_results_csv(path: str | Path, scenario: str, entries: list[EvalEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(["scenario", "method", "seed", "task", "metric", "old", "new", "all"])
        for e in entries:
            w.writerow(
                [
                    scenario,
                    e.method,
                    e.seed,
                    e.task_index,
                    e.metric,
                    f"{e.old_map:.6f}",
                    f"{e.new_map:.6f}",
                    f"{e.all_map:.6f}",
                ]
            )


def write_summary_json(path: str | Path, scenario: str, entries: list[EvalEntry]) -> None:
    payload = {
        "scenario": scenario,
        "entries": [
            {
                "task": e.task_index,
                "method": e.method,
                "seed": e.seed,
                "metric": e.metric,
                "old": e.old_map,
                "new": e.new_map,
                "all": e.all_map,
            }
            for e in entries
        ],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2))
