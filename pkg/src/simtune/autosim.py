"""Outer-loop driver: sample K latents, render, fine-tune, take one
hypergradient step on psi. Tracks cumulative generated samples and wall time.

Each iteration generates exactly one dataset of size K; nothing is resampled
inside an iteration. The model warm-starts from the previous iterate unless
``reset_theta`` asks for a fresh start each time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamVector
from .errors import SimtuneError
from .hypergrad import CgConfig, hypergradient, val_loss_sum
from .model import ModelSpec, TrainConfig, dataset_loss, fine_tune, init_model
from .simgen import SampleLedger, SimParams, SimulatorSpec, render_dataset, sample_latents


@dataclass(frozen=True)
class Problem:
    """A task instance: simulator, model family, and fixed evaluation data."""

    sim: SimulatorSpec
    model_spec: ModelSpec
    val_data: list
    test_data: list = field(default_factory=list)


@dataclass(frozen=True)
class OuterConfig:
    iterations: int
    K: int = 64
    mode: str = "exact_quadratic"
    lam: float = 1e-2
    alpha: float = 0.05
    outer_optimizer: str = "adam"
    clip_norm: float = 10.0
    cg: CgConfig = field(default_factory=CgConfig)
    seed: int = 0
    # inner loop; inner_epochs=0 skips fine-tuning entirely
    inner_epochs: int = 2
    inner_lr: float = 0.2
    inner_batch: int = 4096
    inner_optimizer: str = "sgd"
    inner_momentum: float = 0.0
    reset_theta: bool = False
    val_subsample: int | None = None
    target_val_loss: float | None = None
    wall_limit_seconds: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.inner_epochs < 0:
            raise ValueError("inner_epochs must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    cumulative_samples: int
    val_loss: float
    test_loss: float
    grad_norm: float
    cg_iters: int
    wall_seconds: float
    psi: np.ndarray


@dataclass
class LoopState:
    psi: SimParams
    theta: ParamVector
    t: int = 0
    cumulative_samples: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    elapsed: float = 0.0
    failure: str | None = None


def clip_to_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    if max_norm > 0.0 and n > max_norm:
        return g * (max_norm / n)
    return g


def outer_update(
    raw: np.ndarray,
    grad: np.ndarray,
    cfg: OuterConfig,
    state: LoopState,
    step_index: int,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """One descent step on raw psi; returns (new_raw, adam_m, adam_v)."""
    g = clip_to_norm(grad, cfg.clip_norm)
    if cfg.outer_optimizer == "sgd":
        return raw - cfg.alpha * g, state.adam_m, state.adam_v
    m = state.adam_m if state.adam_m is not None else np.zeros_like(raw)
    v = state.adam_v if state.adam_v is not None else np.zeros_like(raw)
    m = 0.9 * m + 0.1 * g
    v = 0.999 * v + 0.001 * g * g
    mhat = m / (1.0 - 0.9**step_index)
    vhat = v / (1.0 - 0.999**step_index)
    return raw - cfg.alpha * mhat / (np.sqrt(vhat) + 1e-8), m, v


def step(
    state: LoopState,
    problem: Problem,
    cfg: OuterConfig,
    rng: np.random.Generator,
    inner_seed: int,
    ledger: SampleLedger,
    val_rng: np.random.Generator | None = None,
) -> LoopState:
    """One full outer iteration: sample -> fine-tune -> contraction ->
    score-weighted gradient -> psi update. Leaves ``state`` untouched on error."""
    t0 = time.perf_counter()

    latents = sample_latents(state.psi, problem.sim, cfg.K, rng, ledger)
    dataset = render_dataset(latents, problem.sim)

    theta = state.theta
    if cfg.inner_epochs > 0:
        train_cfg = TrainConfig(
            epochs=cfg.inner_epochs,
            batch_size=cfg.inner_batch,
            optimizer=cfg.inner_optimizer,
            lr=cfg.inner_lr,
            momentum=cfg.inner_momentum,
            seed=inner_seed,
        )
        theta = fine_tune(theta, dataset, train_cfg, problem.model_spec)

    val_data = problem.val_data
    if cfg.val_subsample is not None and cfg.val_subsample < len(val_data):
        pick_rng = val_rng if val_rng is not None else rng
        idx = pick_rng.choice(len(val_data), size=cfg.val_subsample, replace=False)
        val_data = [val_data[i] for i in idx]

    val_loss = val_loss_sum(theta, val_data, problem.model_spec)
    report = hypergradient(
        cfg.mode,
        theta,
        state.psi,
        latents,
        problem.sim,
        problem.model_spec,
        val_data,
        cg_cfg=cfg.cg,
        lam=cfg.lam,
        train_data=dataset,
    )

    new_raw, adam_m, adam_v = outer_update(
        state.psi.raw, report.grad_psi, cfg, state, state.t + 1
    )
    new_psi = state.psi.replace(new_raw)

    test_loss = (
        val_loss_sum(theta, problem.test_data, problem.model_spec)
        if problem.test_data
        else float("nan")
    )
    elapsed = state.elapsed + (time.perf_counter() - t0)
    record = IterationRecord(
        iteration=state.t + 1,
        cumulative_samples=state.cumulative_samples + cfg.K,
        val_loss=val_loss,
        test_loss=test_loss,
        grad_norm=float(np.linalg.norm(report.grad_psi)),
        cg_iters=report.cg_iters,
        wall_seconds=elapsed,
        psi=new_raw.copy(),
    )
    return LoopState(
        psi=new_psi,
        theta=theta,
        t=state.t + 1,
        cumulative_samples=state.cumulative_samples + cfg.K,
        history=state.history + [record],
        adam_m=adam_m,
        adam_v=adam_v,
        elapsed=elapsed,
    )


def run(
    problem: Problem,
    cfg: OuterConfig,
    psi0: SimParams,
    theta0: ParamVector | None = None,
    ledger: SampleLedger | None = None,
    sink=None,
) -> LoopState:
    """Run the outer loop until the iteration budget, the target validation
    loss, or the wall-clock limit is hit. Deterministic given cfg.seed."""
    ledger = ledger if ledger is not None else SampleLedger()
    theta_init = theta0 if theta0 is not None else init_model(problem.model_spec, cfg.seed)
    state = LoopState(psi=psi0, theta=theta_init)

    ss = np.random.SeedSequence([cfg.seed, 0x5EED])
    children = ss.spawn(cfg.iterations)

    for t in range(cfg.iterations):
        sample_ss, inner_ss = children[t].spawn(2)
        rng = np.random.default_rng(sample_ss)
        inner_seed = int(inner_ss.generate_state(1)[0])
        if cfg.reset_theta:
            state = replace_theta(state, theta_init)
        try:
            state = step(state, problem, cfg, rng, inner_seed, ledger)
        except SimtuneError as err:
            state.failure = f"{type(err).__name__}: {err}"
            break
        record = state.history[-1]
        if sink is not None:
            sink(record)
        if cfg.target_val_loss is not None and record.val_loss <= cfg.target_val_loss:
            break
        if cfg.wall_limit_seconds is not None and state.elapsed >= cfg.wall_limit_seconds:
            break
    return state


def replace_theta(state: LoopState, theta: ParamVector) -> LoopState:
    return LoopState(
        psi=state.psi,
        theta=theta,
        t=state.t,
        cumulative_samples=state.cumulative_samples,
        history=state.history,
        adam_m=state.adam_m,
        adam_v=state.adam_v,
        elapsed=state.elapsed,
        failure=state.failure,
    )


def evaluate_model(theta: ParamVector, data, spec: ModelSpec) -> float:
    """Mean per-example loss, for reporting."""
    return dataset_loss(theta, data, spec)
