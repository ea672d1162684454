"""Experiment configuration: a JSON document validated in one pass."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from feddp import dpgate
from feddp.errors import ConfigError
from feddp.fed import DENOMINATORS, SCHEDULES, STRATEGIES, FLConfig
from feddp.nn.spec import PRESETS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticData(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    classes: int = Field(4, ge=2)
    per_class: int = Field(150, ge=1)
    test_per_class: int = Field(100, ge=1)
    image_size: int = Field(8, ge=4)
    noise: float = Field(0.2, ge=0)
    seed: int | None = None


class Cifar10Data(_Strict):
    kind: Literal["cifar10"]
    path: str


class PartitionConfig(_Strict):
    num_clients: int = Field(8, ge=1)
    beta: float = Field(0.1, gt=0)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    seed: int | None = None


class FederationConfig(_Strict):
    strategy: Literal[STRATEGIES] = "scaffold"
    dynamic_pruning: bool = True
    rounds: int = Field(50, ge=0)
    local_epochs: int = Field(2, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    weight_decay: float = Field(5e-4, ge=0)
    sample_rate: float = Field(1.0, gt=0, le=1)
    mu: float = Field(0.01, ge=0)
    lr_schedule: Literal[SCHEDULES] = "cosine"
    control_denominator: Literal[DENOMINATORS] = "epochs"


class GateConfig(_Strict):
    keep_ratio: float | dict[str, float] | None = None
    lasso: float = Field(dpgate.DEFAULT_LASSO, ge=0)

    @field_validator("keep_ratio")
    @classmethod
    def _ratio_range(cls, v):
        vals = v.values() if isinstance(v, dict) else ([] if v is None else [v])
        for r in vals:
            if not 0 < r <= 1:
                raise ValueError(f"keep ratio {r} outside (0, 1]")
        return v


class SweepConfig(_Strict):
    strategies: list[Literal[STRATEGIES]] = Field(default_factory=lambda: list(STRATEGIES),
                                                  min_length=1)
    pruning: list[bool] = Field(default_factory=lambda: [True, False], min_length=1)


class ExperimentConfig(_Strict):
    model: str = "tiny-vgg"
    dataset: Union[SyntheticData, Cifar10Data] = Field(default_factory=SyntheticData,
                                                       discriminator="kind")
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    gates: GateConfig = Field(default_factory=GateConfig)
    target_accuracy: float | None = Field(0.78, ge=0, le=1)
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    # write measured seconds into the CSV (breaks byte-identical reruns)
    wall_clock: bool = False
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @field_validator("model")
    @classmethod
    def _known_model(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown model preset {v!r}; choose from {sorted(PRESETS)}")
        return v

    def fl_config(self, threads: int = 1, **overrides) -> FLConfig:
        fields = self.federation.model_dump()
        fields.update(keep_ratio=self.gates.keep_ratio, lasso=self.gates.lasso,
                      seed=self.seed, threads=threads)
        fields.update(overrides)
        return FLConfig(**fields)

    @property
    def data_seed(self) -> int:
        seed = getattr(self.dataset, "seed", None)
        return self.seed if seed is None else seed

    @property
    def partition_seed(self) -> int:
        return self.seed if self.partition.seed is None else self.partition.seed


def format_errors(exc: ValidationError) -> list[str]:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return lines


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(format_errors(exc))) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)
