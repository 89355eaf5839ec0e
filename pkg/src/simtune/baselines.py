"""Black-box comparators: REINFORCE over the full objective and random
search. Both treat (sample dataset, train, validate) as one opaque
evaluation and share the simulator, trainer, and sample ledger with the
main loop, so sample-efficiency comparisons are apples to apples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autosim import IterationRecord, Problem, clip_to_norm
from .errors import TrainingDiverged
from .hypergrad import val_loss_sum
from .model import TrainConfig, fine_tune, init_model
from .simgen import SampleLedger, SimParams, make_params, render_dataset, sample_latents


@dataclass
class BlackBoxEval:
    """One objective evaluation: dataset sampled, model trained, val loss."""

    psi_candidate: SimParams
    dataset_size: int
    val_loss: float
    samples_charged: int
    seconds: float
    theta: object = None
    test_loss: float = float("nan")
    diverged: bool = False


@dataclass(frozen=True)
class EvalConfig:
    K: int
    epochs: int = 40
    batch_size: int = 4096
    lr: float = 0.2
    optimizer: str = "sgd"
    momentum: float = 0.0
    init_seed: int = 0
    warm_start: bool = False  # black-box default is a fresh model per evaluation


def evaluate_objective(
    psi: SimParams,
    problem: Problem,
    cfg: EvalConfig,
    rng: np.random.Generator,
    ledger: SampleLedger,
    train_seed: int = 0,
    theta_warm=None,
) -> BlackBoxEval:
    """Sample a K-point dataset from psi, train, return validation loss.

    Charges K to the ledger. Training divergence is recorded as an infinite
    val loss rather than raised, so searches can continue past bad psi."""
    t0 = time.perf_counter()
    latents = sample_latents(psi, problem.sim, cfg.K, rng, ledger)
    dataset = render_dataset(latents, problem.sim)
    if cfg.warm_start and theta_warm is not None:
        theta = theta_warm
    else:
        theta = init_model(problem.model_spec, cfg.init_seed)
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        optimizer=cfg.optimizer,
        lr=cfg.lr,
        momentum=cfg.momentum,
        seed=train_seed,
    )
    try:
        theta = fine_tune(theta, dataset, train_cfg, problem.model_spec)
        val = val_loss_sum(theta, problem.val_data, problem.model_spec)
        test = (
            val_loss_sum(theta, problem.test_data, problem.model_spec)
            if problem.test_data
            else float("nan")
        )
        diverged = False
    except TrainingDiverged:
        val = float("inf")
        test = float("nan")
        diverged = True
    return BlackBoxEval(
        psi_candidate=psi,
        dataset_size=cfg.K,
        val_loss=val,
        samples_charged=cfg.K,
        seconds=time.perf_counter() - t0,
        theta=theta,
        test_loss=test,
        diverged=diverged,
    )


@dataclass
class SearchResult:
    records: list[IterationRecord] = field(default_factory=list)
    best_val: float = float("inf")
    best_psi_raw: np.ndarray | None = None
    failure: str | None = None


def policy_gradient(rewards: np.ndarray, noises: np.ndarray, sigma: float) -> np.ndarray:
    """Score-function ascent direction for the Gaussian-mean policy.

    sum_p (r_p - rbar) * score_p with score_p = (candidate_p - mean)/sigma^2
    = noise_p / sigma; the mean baseline makes equal rewards cancel exactly.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    baseline = rewards.mean()
    return ((rewards - baseline)[:, None] * noises / sigma).sum(axis=0)


@dataclass(frozen=True)
class LtsConfig:
    iterations: int
    population: int = 4
    sigma: float = 0.1
    lr: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0
    evaluation: EvalConfig = None  # required
    target_val_loss: float | None = None
    wall_limit_seconds: float | None = None

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("need at least 2 candidates for a mean baseline")
        if self.evaluation is None:
            raise ValueError("evaluation config is required")


def lts_reinforce(
    problem: Problem,
    cfg: LtsConfig,
    psi0: SimParams,
    ledger: SampleLedger | None = None,
    sink=None,
) -> SearchResult:
    """REINFORCE on the black-box objective (the learning-to-simulate
    baseline): a Gaussian policy over raw psi with learnable mean and fixed
    exploration sigma, reward = -val_loss with a mean-reward baseline.

    Each iteration evaluates ``population`` candidates, charging
    population * K samples; that multiplicity is the structural cost the
    single-evaluation main loop avoids."""
    ledger = ledger if ledger is not None else SampleLedger()
    result = SearchResult()
    nu = psi0.raw.copy()
    elapsed = 0.0

    ss = np.random.SeedSequence([cfg.seed, 0x17D5])
    children = ss.spawn(cfg.iterations)

    for t in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = np.random.default_rng(children[t])
        eps = rng.standard_normal((cfg.population, nu.size))
        evals: list[BlackBoxEval] = []
        for p in range(cfg.population):
            candidate = psi0.replace(nu + cfg.sigma * eps[p])
            seed_p = int(children[t].generate_state(cfg.population + 1)[p + 1])
            evals.append(
                evaluate_objective(candidate, problem, cfg.evaluation, rng, ledger, seed_p)
            )
        survivors = [(e, eps[p]) for p, e in enumerate(evals) if np.isfinite(e.val_loss)]

        update_norm = 0.0
        if len(survivors) >= 2:
            rewards = np.array([-e.val_loss for e, _ in survivors])
            baseline = rewards.mean()
            g = np.zeros_like(nu)
            for (e, noise), r in zip(survivors, rewards):
                score = noise / cfg.sigma  # (candidate - nu) / sigma^2, with candidate = nu + sigma*noise
                g += (r - baseline) * score
            update_norm = float(np.linalg.norm(g))
            nu = nu + cfg.lr * clip_to_norm(g, cfg.clip_norm)

        best = min(evals, key=lambda e: e.val_loss)
        elapsed += time.perf_counter() - t0
        record = IterationRecord(
            iteration=t + 1,
            cumulative_samples=ledger.count,
            val_loss=best.val_loss,
            test_loss=best.test_loss,
            grad_norm=update_norm,
            cg_iters=0,
            wall_seconds=elapsed,
            psi=nu.copy(),
        )
        result.records.append(record)
        if sink is not None:
            sink(record)
        if best.val_loss < result.best_val:
            result.best_val = best.val_loss
            result.best_psi_raw = best.psi_candidate.raw.copy()
        if cfg.target_val_loss is not None and best.val_loss <= cfg.target_val_loss:
            break
        if cfg.wall_limit_seconds is not None and elapsed >= cfg.wall_limit_seconds:
            break
    return result


@dataclass(frozen=True)
class RandomSearchConfig:
    iterations: int
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()
    seed: int = 0
    evaluation: EvalConfig = None  # required
    target_val_loss: float | None = None
    wall_limit_seconds: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration budget must be >= 1")
        if self.evaluation is None:
            raise ValueError("evaluation config is required")


def random_search(
    problem: Problem,
    cfg: RandomSearchConfig,
    ledger: SampleLedger | None = None,
    sink=None,
) -> SearchResult:
    """I.i.d. psi draws from a fixed box over raw psi; tracks best-so-far."""
    ledger = ledger if ledger is not None else SampleLedger()
    result = SearchResult()
    low = np.asarray(cfg.low, dtype=np.float64)
    high = np.asarray(cfg.high, dtype=np.float64)
    elapsed = 0.0

    ss = np.random.SeedSequence([cfg.seed, 0x2A2D])
    children = ss.spawn(cfg.iterations)

    for t in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = np.random.default_rng(children[t])
        raw = rng.uniform(low, high)
        psi = make_params(problem.sim, raw)
        seed_t = int(children[t].generate_state(2)[1])
        ev = evaluate_objective(psi, problem, cfg.evaluation, rng, ledger, seed_t)
        if ev.val_loss < result.best_val:
            result.best_val = ev.val_loss
            result.best_psi_raw = raw.copy()
        elapsed += time.perf_counter() - t0
        record = IterationRecord(
            iteration=t + 1,
            cumulative_samples=ledger.count,
            val_loss=ev.val_loss,
            test_loss=ev.test_loss,
            grad_norm=0.0,
            cg_iters=0,
            wall_seconds=elapsed,
            psi=raw.copy(),
        )
        result.records.append(record)
        if sink is not None:
            sink(record)
        if cfg.target_val_loss is not None and ev.val_loss <= cfg.target_val_loss:
            break
        if cfg.wall_limit_seconds is not None and elapsed >= cfg.wall_limit_seconds:
            break
    return result
