"""Experiment configuration: YAML in, validated pydantic models out.

Unknown keys are rejected with their full path; YAML syntax errors keep
their line numbers. Optional fields left null fall back to the task's tuned
defaults at run time, so a minimal config is just a task, a method, and a
budget.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from ..errors import ConfigError


class CgSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")
    max_iters: int = 50
    rel_tolerance: float = 1e-6
    negative_curvature_policy: Literal["truncate", "raise_damping"] = "truncate"


class InnerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")
    epochs: int | None = None
    batch_size: int | None = None
    optimizer: Literal["sgd", "adam"] | None = None
    lr: float | None = None
    momentum: float = 0.0


class Budget(BaseModel):
    model_config = ConfigDict(extra="forbid")
    iterations: int
    wall_seconds: float | None = None
    target_val_loss: float | None = None


class LtsSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")
    population: int = 4
    sigma: float = 0.1
    lr: float | None = None
    train_epochs: int | None = None


class RandomSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")
    low: list[float] | None = None
    high: list[float] | None = None
    train_epochs: int | None = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    task: Literal["gaussian-match", "source-mixture", "toy-1d"]
    method: Literal["autosimulate", "lts", "random"] = "autosimulate"
    mode: Literal["exact_quadratic", "approx_quadratic", "linear", "no_val"] = (
        "exact_quadratic"
    )
    seed: int = 0
    budget: Budget
    K: int | None = None
    lam: float | None = None
    alpha: float | None = None
    outer_optimizer: Literal["sgd", "adam"] | None = None
    clip_norm: float | None = None
    init_seed: int | None = None
    val_size: int | None = None
    test_size: int | None = None
    val_subsample: int | None = None
    reset_theta: bool = False
    inner: InnerSettings = InnerSettings()
    cg: CgSettings = CgSettings()
    lts: LtsSettings = LtsSettings()
    random: RandomSettings = RandomSettings()
    out_name: str | None = None


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        lines = []
        for e in err.errors():
            path = ".".join(str(p) for p in e["loc"]) or "<root>"
            if e["type"] == "extra_forbidden":
                lines.append(f"unknown key '{path}'")
            else:
                lines.append(f"{path}: {e['msg']}")
        raise ConfigError("invalid experiment config: " + "; ".join(lines)) from err


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"could not parse {path}{where}: {err}") from err
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return parse_config(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
