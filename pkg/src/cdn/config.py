"""Run configuration document shared by all CLI subcommands."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .cdn_model import CdnConfig
from .scm_sim import CorpusConfig
from .training import TrainConfig


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid_points: int = Field(101, ge=2)
    aggregation: Literal["per-regime", "pooled"] = "per-regime"
    mbci_lambda: float = Field(0.05, gt=0)
    ensemble: int | None = Field(None, ge=1)
    soft_bootstrap: int = Field(50, ge=2)


class RunConfig(BaseModel):
    """Every section is optional; absent sections take their defaults."""

    model_config = ConfigDict(extra="forbid")

    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: CdnConfig = Field(default_factory=CdnConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int | None = None
    workers: int = Field(1, ge=1)


class ConfigFileError(ValueError):
    pass


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{p}: invalid JSON: {exc}") from exc
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigFileError(f"{p}: {exc}") from exc
