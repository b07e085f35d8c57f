"""Experiment configuration with a JSON mirror.

The JSON layout follows the dataclass nesting exactly, so a dumped config
reloads to an identical experiment.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .descriptors import DescriptorConfig
from .errors import ContractViolationError, InvalidInputError


@dataclass(frozen=True)
class ModelConfig:
    num_experts: int = 6
    top_k: int = 1
    channels: int = 32
    hidden: int = 64
    patch_size: int = 8
    num_classes: int = 2
    num_blocks: int = 2
    lambda_bc: float = 0.005

    def __post_init__(self):
        if not (1 <= self.top_k <= self.num_experts):
            raise InvalidInputError(
                f"top_k must be in [1, {self.num_experts}], got {self.top_k}"
            )
        if self.lambda_bc < 0:
            raise InvalidInputError("lambda_bc must be >= 0")
        if min(self.channels, self.hidden, self.patch_size, self.num_classes, self.num_blocks) < 1:
            raise InvalidInputError("model dimensions must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    float32: bool = False
    # > 1 opts into sharded (per-image) gradient accumulation; the ordered
    # reduction makes results identical for any worker count
    grad_workers: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate and weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
        if self.grad_workers < 1:
            raise InvalidInputError("grad_workers must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    descriptors: DescriptorConfig = field(default_factory=DescriptorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    # which physical descriptors feed the router (entropy, ENL, roughness)
    descriptor_mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        mask = tuple(bool(v) for v in self.descriptor_mask)
        if len(mask) != 3:
            raise InvalidInputError("descriptor_mask must have exactly 3 entries")
        object.__setattr__(self, "descriptor_mask", mask)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            desc = dict(raw.get("descriptors", {}))
            if "roughness_grid" in desc:
                desc["roughness_grid"] = tuple(desc["roughness_grid"])
            return cls(
                model=ModelConfig(**raw.get("model", {})),
                optimizer=OptimizerConfig(**raw.get("optimizer", {})),
                descriptors=DescriptorConfig(**desc),
                data=DataConfig(**raw.get("data", {})),
                descriptor_mask=tuple(raw.get("descriptor_mask", (True, True, True))),
            )
        except TypeError as exc:
            raise ContractViolationError(f"unknown config field: {exc}") from exc

    @classmethod
    def from_file(cls, path, check_paths: bool = True) -> "ExperimentConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        if check_paths:
            for name in ("train_dir", "eval_dir"):
                value = getattr(cfg.data, name)
                if value is not None and not Path(value).exists():
                    raise ContractViolationError(f"config {name} does not exist: {value}")
        return cfg
