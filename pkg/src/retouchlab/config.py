"""Run configuration: one flat JSON document shared by every command.

Unknown keys are rejected so typos fail fast instead of silently training
with defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .data import GenConfig
from .errors import ConfigError
from .training import LossWeights, StageSchedule


@dataclass
class RunConfig:
    dataset_root: str = "data"
    checkpoint: str = "checkpoint.rtlb"
    seed: int = 0
    image_size: int = 64
    tau: float = 1.0
    lambda_priority: float = 1.0
    lambda_mask: float = 1.0
    w_human: float = 5.0
    w_other: float = 1.0
    stage1_iters: int = 15000
    stage2_iters: int = 2000
    stage3_iters: int = 3000
    lr0: float = 1e-4
    decay: float = 0.5
    decay_every: int = 5000
    batch: int = 10
    stage3_mix_prob: float = 0.5
    count: int = 500
    train_fraction: float = 0.8
    min_instances: int = 1
    max_instances: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        if not (0 < self.train_fraction < 1):
            raise ConfigError("train_fraction must be in (0, 1)")
        self.schedule().validate()
        self.loss_weights().validate()
        self.gen_config().validate()

    def schedule(self) -> StageSchedule:
        return StageSchedule(
            stage1_iters=self.stage1_iters, stage2_iters=self.stage2_iters,
            stage3_iters=self.stage3_iters, lr0=self.lr0, decay=self.decay,
            decay_every=self.decay_every, batch=self.batch,
            stage3_mix_prob=self.stage3_mix_prob)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_priority=self.lambda_priority, lambda_mask=self.lambda_mask,
            w_human=self.w_human, w_other=self.w_other)

    def gen_config(self) -> GenConfig:
        return GenConfig(count=self.count, height=self.image_size,
                         width=self.image_size, min_instances=self.min_instances,
                         max_instances=self.max_instances, seed=self.seed)
