"""Experiment configuration: a validated JSON document with a published schema."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .tasks import TEMPERATURE_GRID


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    width: int = Field(16, ge=4)
    depth: int = Field(2, ge=2, le=6)
    use_batchnorm: bool = True
    in_channels: int = Field(3, ge=1)


class DataSection(_Strict):
    source: Literal["synthetic", "idx", "csv", "manifest"] = "synthetic"
    # synthetic generator
    n: int = Field(1000, ge=4)
    n_classes: int = Field(10, ge=2)
    resolution: int = Field(8, ge=4)
    seed: int = 0
    variant: Literal["base", "shifted"] = "base"
    family_seed: int = 0
    label_seed: Optional[int] = None
    noise: float = Field(0.15, ge=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    # file-backed sources
    path: Optional[str] = None
    labels: Optional[str] = None

    @model_validator(mode="after")
    def _paths(self):
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"data source {self.source!r} needs 'path'")
        return self


class AugSection(_Strict):
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_p: float = Field(0.5, ge=0, le=1)
    noise_sigma: float = Field(0.05, ge=0, le=0.05)
    jitter: float = Field(0.1, ge=0, le=0.1)


class TaskSection(_Strict):
    kind: Literal["supervised", "ntxent", "momentum_queue"] = "supervised"
    temperature: Optional[float] = Field(None, gt=0)
    queue_size: int = Field(256, ge=1)
    momentum_coef: float = Field(0.99, ge=0, le=1)
    embed_dim: int = Field(32, ge=1)
    aug: Optional[AugSection] = None


class ScheduleSection(_Strict):
    kind: Literal["fixed", "step", "cosine", "warmup_step"] = "cosine"
    milestones: tuple[int, ...] = ()
    factor: float = Field(0.1, gt=0)
    lr_min: float = Field(0.0, ge=0)
    warmup_iters: int = Field(0, ge=0)


class TrainSection(_Strict):
    epochs: int = Field(4, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    schedule: ScheduleSection = ScheduleSection()


class PhaseSection(_Strict):
    data: DataSection = DataSection()
    task: TaskSection = TaskSection()
    train: TrainSection = TrainSection()

    @model_validator(mode="after")
    def _queue(self):
        if self.task.kind == "momentum_queue" and self.task.queue_size < self.train.batch_size:
            raise ValueError("task.queue_size must be >= train.batch_size")
        return self


class PretrainSection(PhaseSection):
    rewind_percents: tuple[float, ...] = (5.0,)

    @model_validator(mode="after")
    def _percents(self):
        if any(not 0 < p < 100 for p in self.rewind_percents):
            raise ValueError("rewind_percents must lie in (0, 100)")
        return self


class ImpSection(_Strict):
    task: str = "pretrain"
    rounds: int = Field(5, ge=0, le=40)
    p: float = Field(0.2, gt=0, lt=1)
    rewind: Literal["pretrained", "random", "early"] = "pretrained"
    percent: float = Field(5.0, gt=0, lt=100)


class SweepSection(_Strict):
    task: str = "pretrain"
    axes: dict[str, list] = Field(default_factory=lambda: {
        "round": [0, 1], "temperature": list(TEMPERATURE_GRID)})
    epochs: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _axes(self):
        allowed = {"round", "temperature", "width", "init"}
        unknown = set(self.axes) - allowed
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; allowed {sorted(allowed)}")
        if any(not v for v in self.axes.values()):
            raise ValueError("sweep axes must be non-empty lists")
        bad = [i for i in self.axes.get("init", []) if i not in ("pretrained", "random")]
        if bad:
            raise ValueError(f"unsupported sweep init values {bad}")
        return self


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    model: ModelSection = ModelSection()
    pretrain: PretrainSection = PretrainSection()
    downstream: dict[str, PhaseSection] = Field(default_factory=dict)
    imp: ImpSection = ImpSection()
    sweep: Optional[SweepSection] = None

    @model_validator(mode="after")
    def _refs(self):
        if "pretrain" in self.downstream:
            raise ValueError("'pretrain' is reserved and cannot name a downstream task")
        known = {"pretrain", *self.downstream}
        if self.imp.task not in known:
            raise ValueError(f"imp.task {self.imp.task!r} is not one of {sorted(known)}")
        if self.sweep is not None and self.sweep.task not in known:
            raise ValueError(f"sweep.task {self.sweep.task!r} is not one of {sorted(known)}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    def phase(self, task_id: str) -> PhaseSection:
        return self.pretrain if task_id == "pretrain" else self.downstream[task_id]


def schema() -> dict:
    return ExperimentConfig.model_json_schema()


def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{origin}: {_format_errors(exc)}") from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), str(path))
