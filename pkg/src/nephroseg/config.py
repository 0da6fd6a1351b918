"""Pipeline configuration: one versioned JSON document."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .augment import AugmentationSpec
from .errors import ConfigError, MissingInputError, NephrosegError
from .phantom import PhantomTemplate
from .unet.train import TrainConfig
from .volume import CLIP_RANGE, DEFAULT_PATCH, PAPER_SPACING

SCHEMA_VERSION = 1


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    target_spacing: tuple[float, float, float] = PAPER_SPACING
    clip: tuple[float, float] = CLIP_RANGE
    test_fraction: float = 0.2
    folds: int = 3
    phantom: PhantomTemplate = field(default_factory=PhantomTemplate)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    patch_shape: tuple[int, int, int] = DEFAULT_PATCH
    stride: tuple[int, int, int] | None = None
    connectivity: int = 26
    min_component_voxels: int = 1

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.clip = tuple(float(c) for c in self.clip)
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if self.stride is None:
            self.stride = tuple(max(1, p // 2) for p in self.patch_shape)
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.target_spacing) != 3 or any(not s > 0 for s in self.target_spacing):
            raise ConfigError(f"target_spacing must be three positive values, got {self.target_spacing}")
        if len(self.clip) != 2 or not self.clip[0] < self.clip[1]:
            raise ConfigError(f"clip must be [lo, hi] with lo < hi, got {self.clip}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.min_component_voxels < 1:
            raise ConfigError("min_component_voxels must be >= 1")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        try:
            self.training.architecture.check_input(self.patch_shape)
        except NephrosegError as exc:
            raise ConfigError(f"patch_shape: {exc}") from exc
        for name, path in self.paths.items():
            if not os.path.exists(path):
                raise MissingInputError(f"paths.{name}: {path} does not exist")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "paths": dict(self.paths),
            "preprocess": {"target_spacing": list(self.target_spacing), "clip": list(self.clip)},
            "split": {"test_fraction": self.test_fraction, "folds": self.folds},
            "phantom": self.phantom.to_json(),
            "augmentation": self.augmentation.to_json(),
            "training": self.training.to_json(),
            "inference": {"patch_shape": list(self.patch_shape), "stride": list(self.stride)},
            "detection": {"connectivity": self.connectivity,
                          "min_component_voxels": self.min_component_voxels},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        known = {"schema_version", "seed", "paths", "preprocess", "split", "phantom",
                 "augmentation", "training", "inference", "detection"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {"seed": int(obj.get("seed", 0)), "paths": dict(obj.get("paths", {}))}
        sections = {
            "preprocess": {"target_spacing", "clip"},
            "split": {"test_fraction", "folds"},
            "inference": {"patch_shape", "stride"},
            "detection": {"connectivity", "min_component_voxels"},
        }
        for section, keys in sections.items():
            block = obj.get(section, {})
            extra = set(block) - keys
            if extra:
                raise ConfigError(f"{section}: unknown keys {sorted(extra)}")
            kwargs.update(block)
        try:
            if "phantom" in obj:
                kwargs["phantom"] = PhantomTemplate.from_json(obj["phantom"])
            if "augmentation" in obj:
                kwargs["augmentation"] = AugmentationSpec.from_json(obj["augmentation"])
            if "training" in obj:
                kwargs["training"] = TrainConfig.from_json(obj["training"])
            return cls(**kwargs)
        except ConfigError:
            raise
        except (NephrosegError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingInputError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return PipelineConfig.from_json(obj)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
