"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict

from ..bench.config import ExperimentConfig


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    out_dir: str | None = None


class RunResponse(BaseModel):
    metrics_path: str
    summary: dict


class OracleRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: ExperimentConfig
    h: float = 1e-2
    psi: list[float] | None = None


class OracleResponse(BaseModel):
    task: str
    h: float
    psi: list[float]
    gradient: list[float]


class CheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    level: str = "fast"


class CheckRow(BaseModel):
    name: str
    passed: bool
    detail: str
    seconds: float


class CheckResponse(BaseModel):
    level: str
    all_passed: bool
    results: list[CheckRow]


class HealthResponse(BaseModel):
    status: str
    version: str
