"""FastAPI service wrapping the benchmark harness.

Experiments run synchronously in the request (desk scale); the CLI is a thin
client over the same operations, either in-process or against a running
server.
"""

from __future__ import annotations

import yaml
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..bench import checks as bench_checks
from ..bench.oracle import run_oracle
from ..bench.runner import run_experiment
from ..errors import SimtuneError
from .schemas import (
    CheckRequest,
    CheckResponse,
    CheckRow,
    HealthResponse,
    OracleRequest,
    OracleResponse,
    RunRequest,
    RunResponse,
)

app = FastAPI(title="simtune", version=__version__)


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/run", response_model=RunResponse)
def run(request: RunRequest) -> RunResponse:
    try:
        metrics_path = run_experiment(request.config, request.out_dir)
    except SimtuneError as err:
        raise HTTPException(status_code=400, detail=str(err))
    summary_file = metrics_path.parent / (metrics_path.stem + ".summary.yaml")
    summary = yaml.safe_load(summary_file.read_text())
    return RunResponse(metrics_path=str(metrics_path), summary=summary)


@app.post("/oracle", response_model=OracleResponse)
def oracle(request: OracleRequest) -> OracleResponse:
    try:
        out = run_oracle(request.config, h=request.h, psi_raw=request.psi)
    except SimtuneError as err:
        raise HTTPException(status_code=400, detail=str(err))
    return OracleResponse(**out)


@app.post("/check", response_model=CheckResponse)
def check(request: CheckRequest) -> CheckResponse:
    if request.level not in ("fast", "full"):
        raise HTTPException(status_code=400, detail="level must be 'fast' or 'full'")
    results = bench_checks.check_suite(request.level)
    rows = [
        CheckRow(name=r.name, passed=r.passed, detail=r.detail, seconds=r.seconds)
        for r in results
    ]
    return CheckResponse(
        level=request.level,
        all_passed=all(r.passed for r in results),
        results=rows,
    )
