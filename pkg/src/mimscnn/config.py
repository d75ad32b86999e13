"""Experiment configuration (JSON-serializable)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("mims", "mims-noresizing", "si-cnn", "mi-pre-conv", "mi-pre", "pyramid-input")
POOLS = ("topk", "mean", "max", "max-inst", "patchcls-mean")
OPTIMIZERS = ("adam", "sgd")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    variant: str = "mims"
    pool: str = "topk"
    k: int = 5
    decay: float = 1.0
    scales: list = field(default_factory=lambda: [0.5, 0.75, 1.0])
    kernel_groups: list = field(default_factory=lambda: [[2, 8], [3, 10]])
    stem_channels: list = field(default_factory=lambda: [8, 16, 32])
    in_channels: int = 1
    pyramid_scales: list = field(default_factory=lambda: [0.5, 0.75, 1.0])
    optimizer: str = "adam"
    lr: float = 1e-3
    backbone_lr_factor: float = 0.5
    epochs: int = 7
    batch_bags: int = 4
    seed: int = 0
    data: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.pool not in POOLS:
            raise ConfigError(f"unknown pool {self.pool!r}; choose from {', '.join(POOLS)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if int(self.k) < 1:
            raise ConfigError("k must be >= 1")
        if self.lr < 0 or self.backbone_lr_factor < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.epochs < 0 or self.batch_bags < 1:
            raise ConfigError("epochs must be >= 0 and batch_bags >= 1")
        if not self.stem_channels or any(c < 1 for c in self.stem_channels):
            raise ConfigError(f"invalid stem_channels {self.stem_channels}")
        for s in list(self.scales) + list(self.pyramid_scales):
            if not 0.25 <= float(s) <= 2.0:
                raise ConfigError(f"scale {s} outside [1/4, 2]")
        try:
            for k, c in self.kernel_groups:
                if int(k) < 1 or int(c) < 1:
                    raise ConfigError(f"invalid kernel group {k}({c})")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"kernel_groups must be [[size, channels], ...]: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw).validate()
