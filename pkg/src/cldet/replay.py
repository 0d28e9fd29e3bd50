"""Capacity-bounded replay memory with a class-balancing greedy update.

Stored samples keep their original class histograms purely for memory
management; the trainer never sees those labels and relies on
self-distillation for replayed images.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class MemorySample:
    """One stored image plus bookkeeping for the balancing update."""

    image_ref: str
    class_histogram: dict[int, int]
    source_task: int

    def __post_init__(self):
        if any(v < 0 for v in self.class_histogram.values()):
            raise ValueError("histogram counts must be non-negative")


@dataclass
class ReplayMemory:
    capacity: int
    samples: list[MemorySample] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    def __len__(self) -> int:
        return len(self.samples)

    def histogram(self, classes: list[int] | None = None) -> dict[int, int]:
        """Aggregate instance counts, optionally over a fixed class list."""
        hist: dict[int, int] = {c: 0 for c in (classes or [])}
        for s in self.samples:
            for c, n in s.class_histogram.items():
                hist[c] = hist.get(c, 0) + n
        return hist

    def save(self, path: str | Path) -> None:
        payload = {
            "capacity": self.capacity,
            "samples": [
                {
                    "image_ref": s.image_ref,
                    "class_histogram": {str(k): v for k, v in s.class_histogram.items()},
                    "source_task": s.source_task,
                }
                for s in self.samples
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ReplayMemory":
        payload = json.loads(Path(path).read_text())
        return cls(
            payload["capacity"],
            [
                MemorySample(
                    s["image_ref"],
                    {int(k): v for k, v in s["class_histogram"].items()},
                    s["source_task"],
                )
                for s in payload["samples"]
            ],
        )


def distribution_distance(hist: dict[int, int], classes: list[int]) -> float:
    """L1 distance between the normalized histogram and uniform over classes."""
    if not classes:
        return 0.0
    total = sum(hist.get(c, 0) for c in classes)
    if total == 0:
        return 2.0  # farthest possible in L1 between distributions
    uniform = 1.0 / len(classes)
    return sum(abs(hist.get(c, 0) / total - uniform) for c in classes)


def ocdm_update(
    memory: ReplayMemory, incoming: list[MemorySample]
) -> ReplayMemory:
    """Greedy eviction toward a uniform class distribution.

    Pool = memory + incoming; while over capacity, drop the single sample
    whose removal gives the smallest distance to uniform over all classes
    seen in the pool. Ties go to the newest source task, then the lowest
    pool index. Deterministic.
    """
    pool = list(memory.samples) + list(incoming)
    if memory.capacity == 0 or not pool:
        return ReplayMemory(memory.capacity, [])

    classes = sorted({c for s in pool for c in s.class_histogram if s.class_histogram[c] > 0})
    hist: dict[int, int] = {}
    for s in pool:
        for c, n in s.class_histogram.items():
            hist[c] = hist.get(c, 0) + n

    while len(pool) > memory.capacity:
        best = None  # (distance, -source_task, index)
        for i, s in enumerate(pool):
            trial = dict(hist)
            for c, n in s.class_histogram.items():
                trial[c] -= n
            d = distribution_distance(trial, classes)
            key = (d, -s.source_task, i)
            if best is None or key < best[0]:
                best = (key, i)
        idx = best[1]
        for c, n in pool[idx].class_histogram.items():
            hist[c] -= n
        pool.pop(idx)
    return ReplayMemory(memory.capacity, pool)


def sample_batch(
    memory: ReplayMemory, k: int, rng_seed: int
) -> list[MemorySample]:
    """Draw k samples uniformly; without replacement unless k exceeds size."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0 or not memory.samples:
        return []
    rng = random.Random(rng_seed)
    if k <= len(memory.samples):
        return rng.sample(memory.samples, k)
    return [rng.choice(memory.samples) for _ in range(k)]


def der_storage_bytes(
    num_anchors: int, num_classes: int, num_bins: int, bytes_per_value: int, num_samples: int
) -> int:
    """Bytes needed to store raw detector outputs for replayed samples.

    The rejected alternative to image replay: each sample costs
    num_anchors * (Nc + 4 * L) values.
    """
    if min(num_anchors, num_classes, num_bins, bytes_per_value, num_samples) <= 0:
        raise ValueError("all arguments must be positive")
    return num_samples * num_anchors * (num_classes + 4 * num_bins) * bytes_per_value
