"""Execute a configured experiment and persist metrics.

Metrics are header-labelled CSV rows flushed as they are produced (a killed
run keeps its partial metrics); the run summary is a YAML document next to
the CSV. Identical config+seed reproduces byte-identical metrics bodies up
to the wall_seconds column.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import yaml

from .. import autosim, baselines, tasks
from ..autosim import IterationRecord, OuterConfig, Problem
from ..hypergrad import CgConfig
from ..model import init_model
from ..simgen import SampleLedger
from .config import ExperimentConfig

METRICS_COLUMNS = (
    "iteration",
    "cumulative_samples",
    "val_loss",
    "test_loss",
    "grad_norm",
    "cg_iters",
    "wall_seconds",
    "psi",
)

OUT_DIR_ENV = "SIMTUNE_OUT_DIR"

SUMMARY_KEYS = (
    "task",
    "method",
    "mode",
    "seed",
    "iterations_run",
    "total_samples",
    "ledger_samples",
    "best_val_loss",
    "final_val_loss",
    "final_test_loss",
    "target_val_loss",
    "reached_target",
    "samples_to_target",
    "seconds_to_target",
    "final_psi",
    "failure",
)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(",".join(METRICS_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, rec: IterationRecord) -> None:
        psi = ";".join(_fmt(v) for v in rec.psi)
        row = [
            _fmt(rec.iteration),
            _fmt(rec.cumulative_samples),
            _fmt(rec.val_loss),
            _fmt(rec.test_loss),
            _fmt(rec.grad_norm),
            _fmt(rec.cg_iters),
            _fmt(rec.wall_seconds),
            psi,
        ]
        self._fh.write(",".join(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def resolve_out_dir(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        out = Path(explicit)
    elif OUT_DIR_ENV in os.environ:
        out = Path(os.environ[OUT_DIR_ENV])
    else:
        out = Path("runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_problem(cfg: ExperimentConfig, task: tasks.Task) -> Problem:
    return Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task, cfg.val_size),
        test_data=tasks.test_data(task, cfg.test_size),
    )


def outer_config(cfg: ExperimentConfig, task: tasks.Task) -> OuterConfig:
    return OuterConfig(
        iterations=cfg.budget.iterations,
        K=cfg.K if cfg.K is not None else task.K,
        mode=cfg.mode,
        lam=cfg.lam if cfg.lam is not None else task.lam,
        alpha=cfg.alpha if cfg.alpha is not None else task.alpha,
        outer_optimizer=cfg.outer_optimizer or task.outer_optimizer,
        clip_norm=cfg.clip_norm if cfg.clip_norm is not None else task.clip_norm,
        cg=CgConfig(
            max_iters=cfg.cg.max_iters,
            rel_tolerance=cfg.cg.rel_tolerance,
            negative_curvature_policy=cfg.cg.negative_curvature_policy,
        ),
        seed=cfg.seed,
        inner_epochs=cfg.inner.epochs if cfg.inner.epochs is not None else task.inner_epochs,
        inner_lr=cfg.inner.lr if cfg.inner.lr is not None else task.inner_lr,
        inner_batch=cfg.inner.batch_size if cfg.inner.batch_size is not None else task.inner_batch,
        inner_optimizer=cfg.inner.optimizer or task.inner_optimizer,
        inner_momentum=cfg.inner.momentum,
        reset_theta=cfg.reset_theta,
        val_subsample=cfg.val_subsample,
        target_val_loss=cfg.budget.target_val_loss,
        wall_limit_seconds=cfg.budget.wall_seconds,
    )


def eval_config(cfg: ExperimentConfig, task: tasks.Task, train_epochs: int | None) -> baselines.EvalConfig:
    return baselines.EvalConfig(
        K=cfg.K if cfg.K is not None else task.K,
        epochs=train_epochs if train_epochs is not None else task.blackbox_epochs,
        batch_size=cfg.inner.batch_size if cfg.inner.batch_size is not None else task.inner_batch,
        lr=cfg.inner.lr if cfg.inner.lr is not None else task.inner_lr,
        optimizer=cfg.inner.optimizer or task.inner_optimizer,
        momentum=cfg.inner.momentum,
        init_seed=cfg.init_seed if cfg.init_seed is not None else task.init_seed,
    )


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Run the configured method and return the metrics CSV path."""
    task = tasks.build_task(cfg.task)
    problem = build_problem(cfg, task)
    ledger = SampleLedger()
    base = cfg.out_name or f"{cfg.task}-{cfg.method}-{cfg.mode}-seed{cfg.seed}"
    out = resolve_out_dir(out_dir)
    metrics_path = out / f"{base}.csv"
    summary_path = out / f"{base}.summary.yaml"

    writer = MetricsWriter(metrics_path)
    records: list[IterationRecord] = []

    def sink(rec: IterationRecord) -> None:
        records.append(rec)
        writer.write(rec)

    failure = None
    try:
        if cfg.method == "autosimulate":
            init_seed = cfg.init_seed if cfg.init_seed is not None else task.init_seed
            theta0 = init_model(task.model, init_seed)
            state = autosim.run(
                problem, outer_config(cfg, task), task.psi0(), theta0, ledger, sink
            )
            failure = state.failure
            final_psi = state.psi.raw
        elif cfg.method == "lts":
            lts_cfg = baselines.LtsConfig(
                iterations=cfg.budget.iterations,
                population=cfg.lts.population,
                sigma=cfg.lts.sigma,
                lr=cfg.lts.lr if cfg.lts.lr is not None else task.lts_lr,
                seed=cfg.seed,
                evaluation=eval_config(cfg, task, cfg.lts.train_epochs),
                target_val_loss=cfg.budget.target_val_loss,
                wall_limit_seconds=cfg.budget.wall_seconds,
            )
            result = baselines.lts_reinforce(problem, lts_cfg, task.psi0(), ledger, sink)
            failure = result.failure
            final_psi = records[-1].psi if records else task.psi0().raw
        else:
            rnd_cfg = baselines.RandomSearchConfig(
                iterations=cfg.budget.iterations,
                low=tuple(cfg.random.low) if cfg.random.low is not None else task.search_low,
                high=tuple(cfg.random.high) if cfg.random.high is not None else task.search_high,
                seed=cfg.seed,
                evaluation=eval_config(cfg, task, cfg.random.train_epochs),
                target_val_loss=cfg.budget.target_val_loss,
                wall_limit_seconds=cfg.budget.wall_seconds,
            )
            result = baselines.random_search(problem, rnd_cfg, ledger, sink)
            failure = result.failure
            final_psi = (
                result.best_psi_raw if result.best_psi_raw is not None else task.psi0().raw
            )
    finally:
        writer.close()

    summary = summarize(cfg, records, ledger, final_psi, failure)
    summary_path.write_text(yaml.safe_dump(summary, sort_keys=False))
    return metrics_path


def summarize(cfg, records, ledger, final_psi, failure) -> dict:
    target = cfg.budget.target_val_loss
    best_val = min((r.val_loss for r in records), default=float("nan"))
    reached = None
    if target is not None:
        reached = next((r for r in records if r.val_loss <= target), None)
    summary = {
        "task": cfg.task,
        "method": cfg.method,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "iterations_run": len(records),
        "total_samples": records[-1].cumulative_samples if records else 0,
        "ledger_samples": ledger.count,
        "best_val_loss": float(best_val),
        "final_val_loss": float(records[-1].val_loss) if records else float("nan"),
        "final_test_loss": float(records[-1].test_loss) if records else float("nan"),
        "target_val_loss": target,
        "reached_target": bool(reached is not None) if target is not None else None,
        "samples_to_target": int(reached.cumulative_samples) if reached is not None else None,
        "seconds_to_target": float(reached.wall_seconds) if reached is not None else None,
        "final_psi": [float(v) for v in final_psi],
        "failure": failure,
    }
    assert tuple(summary) == SUMMARY_KEYS
    return summary


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics CSV back into python values (psi stays a string)."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        for key in ("iteration", "cumulative_samples", "cg_iters"):
            row[key] = int(row[key])
        for key in ("val_loss", "test_loss", "grad_norm", "wall_seconds"):
            row[key] = float(row[key])
        rows.append(row)
    return rows


def metrics_body_without_wall(path: str | Path) -> str:
    """Metrics file text with the wall_seconds column stripped, for the
    byte-identical determinism contract."""
    lines = Path(path).read_text().strip().splitlines()
    drop = METRICS_COLUMNS.index("wall_seconds")
    kept = []
    for line in lines:
        parts = line.split(",")
        kept.append(",".join(parts[:drop] + parts[drop + 1 :]))
    return "\n".join(kept)
