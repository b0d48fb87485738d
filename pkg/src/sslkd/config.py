"""Experiment configuration: YAML documents validated into pydantic models."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dataspace import SceneParams
from .errors import ConfigError
from .modelzoo import ModelSpec
from .trainers import TrainConfig

RUN_ROOT_ENV = "SSLKD_RUN_ROOT"

# Seeds are derived from the run seed S as 1000 * S + offset, so any single
# stage can be reproduced in isolation.
INIT_SEED_OFFSETS = {"teacher1": 1, "teacher2": 2, "student": 3, "cps_partner": 4}
STAGE_SEED_OFFSETS = {
    "teacher1_supervised": 11,
    "teacher2_supervised": 12,
    "cross_model": 20,
    "sslkd": 40,
    "student_supervised": 30,
    "cms": 50,
    "cps": 60,
}


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class DatasetConfig(_Section):
    source: Literal["synthetic", "directory"] = "synthetic"
    scene: SceneParams = SceneParams()
    n_samples: int = Field(300, ge=1)
    root: str | None = None
    n_labelled: int = Field(40, ge=1)
    unlabelled_ratio: int = Field(4, ge=0)
    n_val: int = Field(20, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _root(self):
        if self.source == "directory" and not self.root:
            raise ValueError("dataset.root is required when source is 'directory'")
        return self


class ModelsConfig(_Section):
    teacher1: ModelSpec = ModelSpec(family="dilated_pyramid", backbone_depth="deep")
    teacher2: ModelSpec = ModelSpec(family="pool_index", backbone_depth="deep", feature_tap_channels=48)
    student: ModelSpec = ModelSpec(family="dilated_pyramid", backbone_depth="shallow")


class StagesConfig(_Section):
    teacher_supervised: TrainConfig = TrainConfig()
    cross_model: TrainConfig = TrainConfig()
    student_supervised_init: TrainConfig = TrainConfig()
    sslkd: TrainConfig = TrainConfig()


class BaselinesConfig(_Section):
    supervised: bool = True
    cms: bool = True
    cps: bool = True


class OutputConfig(_Section):
    run_dir: str = "runs/default"
    eval_every: int = Field(0, ge=0)
    resume: bool = True


class ExperimentConfig(_Section):
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    dataset: DatasetConfig = DatasetConfig()
    models: ModelsConfig = ModelsConfig()
    stages: StagesConfig = StagesConfig()
    baselines: BaselinesConfig = BaselinesConfig()
    output: OutputConfig = OutputConfig()

    def stage_config(self, stage: str) -> TrainConfig:
        """TrainConfig for a pipeline stage with its derived seed and eval cadence applied."""
        section = {
            "teacher1_supervised": self.stages.teacher_supervised,
            "teacher2_supervised": self.stages.teacher_supervised,
            "cross_model": self.stages.cross_model,
            "student_supervised": self.stages.student_supervised_init,
            "sslkd": self.stages.sslkd,
            "cms": self.stages.sslkd,
            "cps": self.stages.sslkd,
        }[stage]
        return section.model_copy(
            update={"seed": 1000 * self.seed + STAGE_SEED_OFFSETS[stage], "eval_every": self.output.eval_every}
        )

    def init_seed(self, role: str) -> int:
        return 1000 * self.seed + INIT_SEED_OFFSETS[role]

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output section is excluded)."""
        body = self.model_dump(mode="json", exclude={"output"})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _format_errors(exc: pydantic.ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Parse a YAML document; relative dataset roots resolve against ``base_dir``."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None
    if base_dir is not None and cfg.dataset.root and not Path(cfg.dataset.root).is_absolute():
        root = str((Path(base_dir) / cfg.dataset.root).resolve())
        cfg = cfg.model_copy(update={"dataset": cfg.dataset.model_copy(update={"root": root})})
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base_dir=path.parent)


def resolve_run_dir(cfg: ExperimentConfig) -> Path:
    """Relative run directories live under ``$SSLKD_RUN_ROOT`` when it is set."""
    run_dir = Path(cfg.output.run_dir)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not run_dir.is_absolute():
        run_dir = Path(root) / run_dir
    return run_dir
