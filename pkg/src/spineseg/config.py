"""Experiment configuration: one dataclass tree, serialized verbatim into every artifact.

Checkpoints, caches and metrics files all embed ``ExperimentConfig.hash()``;
loaders reject artifacts whose hash does not match the active config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

DATA_ROOT_ENV = "SPINESEG_DATA_ROOT"


@dataclass
class DataConfig:
    manifest: str = "manifest.yaml"
    cache_dir: str = "cache"
    # (z, y, x) mm per voxel; median resolution of the target dataset.
    target_spacing: tuple[float, float, float] = (4.4, 0.34, 0.34)
    # Standardized full-resolution in-plane grid; stage one sees half of this.
    inplane_size: tuple[int, int] = (448, 880)
    min_depth: int = 12

    def resolve_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV, "."))


@dataclass
class Net2DConfig:
    in_channels: int = 3
    stem_channels: int = 64
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    cardinality: int = 32
    bottleneck_width: int = 4
    se_reduction: int = 16
    aspp_channels: int = 256
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    low_level_channels: int = 48
    decoder_channels: int = 256
    pretrained_encoder: str | None = None


@dataclass
class Net3DConfig:
    stem_channels: int = 32
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    cardinality: int = 8
    bottleneck_width: int = 4
    se_reduction: int = 8
    aspp_channels: int = 256
    aspp_rates: tuple[int, ...] = (6, 12)
    low_level_channels: int = 48


@dataclass
class Stage1Config:
    epochs: int = 1000
    batch_size: int = 4
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (50, 400)
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    cps_weight: float = 1.0
    cutmix: bool = True
    optimizer: str = "adam"
    val_every: int = 10


@dataclass
class Stage2Config:
    epochs: int = 150
    batch_size: int = 4
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (25, 100)
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    patch_size: tuple[int, int, int] = (12, 192, 192)
    patches_per_subject: int = 4
    optimizer: str = "adam"
    val_every: int = 10


@dataclass
class InferenceConfig:
    inplane_stride: tuple[int, int] = (96, 96)
    z_stride: int = 6
    max_patch_batch: int = 2
    ensemble: str = "probability"  # average probabilities, then argmax


@dataclass
class ExperimentConfig:
    # Channel contract: num_classes / feature2d / feature3d / fused channels.
    num_classes: int = 20
    feature2d_channels: int = 128
    feature3d_channels: int = 256
    fused_channels: int = 512
    seed: int = 17
    n_folds: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    net2d: Net2DConfig = field(default_factory=Net2DConfig)
    net3d: Net3DConfig = field(default_factory=Net3DConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.fused_channels != 2 * self.feature3d_channels:
            raise ValueError(
                "fused_channels must be twice feature3d_channels "
                f"(got {self.fused_channels} vs 2*{self.feature3d_channels})"
            )
        if self.feature3d_channels % 8 != 0:
            raise ValueError("feature3d_channels must be divisible by 8 (attention head reduction)")
        for a, p in zip(self.data.inplane_size, self.stage2.patch_size[1:]):
            if a % 4 != 0 or p % 4 != 0:
                raise ValueError("in-plane sizes and patch sizes must be multiples of 4")

    @property
    def stage1_input_size(self) -> tuple[int, int]:
        return (self.data.inplane_size[0] // 2, self.data.inplane_size[1] // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def build(klass, sub):
            kwargs = {}
            for f in dataclasses.fields(klass):
                if f.name not in sub:
                    continue
                v = sub[f.name]
                if f.name in _NESTED:
                    v = build(_NESTED[f.name], v)
                elif isinstance(v, list):
                    v = tuple(v)
                kwargs[f.name] = v
            return klass(**kwargs)

        return build(cls, d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            return cls.from_dict(json.loads(text))
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path: str | Path):
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        else:
            path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_NESTED = {
    "data": DataConfig,
    "net2d": Net2DConfig,
    "net3d": Net3DConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "inference": InferenceConfig,
}


def compact_config(num_classes: int = 8, seed: int = 17) -> ExperimentConfig:
    """Reduced-width configuration sized for CPU smoke runs and phantom studies."""
    return ExperimentConfig(
        num_classes=num_classes,
        feature2d_channels=32,
        feature3d_channels=32,
        fused_channels=64,
        seed=seed,
        data=DataConfig(
            target_spacing=(4.4, 0.34, 0.34),
            inplane_size=(224, 224),
            min_depth=12,
        ),
        net2d=Net2DConfig(
            stem_channels=16,
            stage_blocks=(1, 1, 1, 1),
            stage_channels=(32, 64, 128, 256),
            cardinality=4,
            bottleneck_width=4,
            se_reduction=4,
            aspp_channels=64,
            low_level_channels=16,
            decoder_channels=64,
        ),
        net3d=Net3DConfig(
            stem_channels=16,
            stage_blocks=(1, 1, 1, 1),
            stage_channels=(24, 32, 48, 64),
            cardinality=4,
            bottleneck_width=4,
            se_reduction=4,
            aspp_channels=32,
            aspp_rates=(2, 4),
            low_level_channels=16,
        ),
        stage1=Stage1Config(epochs=150, lr_milestones=(60, 120), val_every=25),
        stage2=Stage2Config(
            epochs=40, lr_milestones=(20, 32), patch_size=(12, 96, 96), val_every=20
        ),
        inference=InferenceConfig(inplane_stride=(48, 48), z_stride=6),
    )
