"""Experiment configuration: one YAML file with a section per subsystem.

Every field has a default, so a config file only needs the keys it wants to
change. Environment variables are deliberately ignored; reproducibility
comes from explicit flags and the on-disk manifest.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .continual import TrainConfig
from .data import SceneSpec
from .detector import GridSpec
from .distill import DistillConfig


@dataclass
class ModelConfig:
    image_size: int = 64
    strides: tuple[int, ...] = (8, 16)
    num_bins: int = 8
    width: int = 16

    def grid(self) -> GridSpec:
        return GridSpec(self.image_size, tuple(self.strides))


@dataclass
class DatasetConfig:
    canvas_size: int = 64
    num_classes: int = 8
    num_train: int = 160
    num_test: int = 80
    min_objects: int = 1
    max_objects: int = 3
    allow_occlusion: bool = True
    seed: int = 0

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            canvas_size=self.canvas_size,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            num_classes=self.num_classes,
            allow_occlusion=self.allow_occlusion,
            seed=self.seed,
        )


@dataclass
class ContinualConfig:
    scenario: str = "4p4"
    memory_size: int = 24
    metric: str = "map50"
    seeds: tuple[int, ...] = (0,)


@dataclass
class ErdConfig:
    alpha1: float = 2.0
    alpha2: float = 2.0
    lambda1: float = 0.01
    lambda2: float = 1.0
    t: float = 1.0
    tau_kl: float = 10.0


@dataclass
class AblationToggles:
    ce: bool = True
    wce: bool = True
    mask: bool = True
    cls_iou: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    erd: ErdConfig = field(default_factory=ErdConfig)
    ablation: AblationToggles = field(default_factory=AblationToggles)
    vanilla_lambda: float = 1.0

    @classmethod
    def from_yaml(cls, path: str | Path | None) -> "ExperimentConfig":
        cfg = cls()
        if path is None:
            return cfg
        payload = yaml.safe_load(Path(path).read_text()) or {}
        sections = {
            "dataset": cfg.dataset,
            "model": cfg.model,
            "train": cfg.train,
            "continual": cfg.continual,
            "distill": cfg.distill,
            "erd": cfg.erd,
            "ablation": cfg.ablation,
        }
        for name, target in sections.items():
            for key, value in (payload.get(name) or {}).items():
                if not hasattr(target, key):
                    raise ValueError(f"unknown config key {name}.{key}")
                current = getattr(target, key)
                if isinstance(current, tuple):
                    value = tuple(value)
                setattr(target, key, value)
        if "vanilla_lambda" in payload:
            cfg.vanilla_lambda = float(payload["vanilla_lambda"])
        if cfg.distill.temperature <= 0:
            raise ValueError("distill.temperature must be positive")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        ).hexdigest()[:16]


def write_manifest(out_dir: str | Path, config: ExperimentConfig, seed: int, extra: dict | None = None) -> None:
    """Record everything needed to re-run: config, seed, versions."""
    import torch

    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "seed": seed,
        "versions": {
            "cldet": __version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
