"""Brute-force finite-difference oracle for the bi-level gradient.

Independent of the analytic machinery: for each raw psi coordinate it
perturbs psi by +/-h, regenerates the dataset with common random numbers,
trains the inner problem to convergence from a fresh init, and central-
differences the summed validation loss. Slow by construction; used only to
cross-check directions.
"""

from __future__ import annotations

import numpy as np

from ..autosim import Problem
from ..diffcore import ParamVector
from ..errors import OracleUnreliable
from ..hypergrad import val_loss_sum
from ..model import TrainConfig, fine_tune, init_model, make_loss, trainable_indices
from ..simgen import SimParams, draw_base_noise, latents_from_noise, render_dataset
from .. import diffcore as dc
from .. import tasks
from .config import ExperimentConfig


def _inner_solution(
    problem: Problem,
    psi: SimParams,
    noise,
    theta0: ParamVector,
    epochs: int,
    lr: float,
    grad_tol: float,
) -> ParamVector:
    latents = latents_from_noise(psi, problem.sim, noise)
    dataset = render_dataset(latents, problem.sim)
    cfg = TrainConfig(epochs=epochs, batch_size=len(dataset), lr=lr, seed=0)
    theta = fine_tune(theta0, dataset, cfg, problem.model_spec)
    f = make_loss(dataset, problem.model_spec, reduction="mean")
    g = dc.gradient(f, theta).values[trainable_indices(problem.model_spec)]
    gnorm = float(np.linalg.norm(g))
    if gnorm > grad_tol:
        raise OracleUnreliable(
            f"inner problem not converged: grad norm {gnorm:.3e} > {grad_tol:.1e}"
        )
    return theta


def oracle_bilevel_grad(
    problem: Problem,
    psi: SimParams,
    h: float = 1e-2,
    K: int = 2048,
    inner_epochs: int = 200,
    inner_lr: float = 0.2,
    init_seed: int = 0,
    noise_seed: int = 0,
    grad_tol: float = 1e-3,
) -> np.ndarray:
    """Central finite differences of L_val(theta_hat(psi +/- h e_i)).

    One base-noise draw is shared by every evaluation, so the only change
    between the +h and -h runs is psi itself.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    noise = draw_base_noise(problem.sim, K, np.random.default_rng(noise_seed))
    theta0 = init_model(problem.model_spec, init_seed)
    grad = np.zeros(psi.dim)
    for i in range(psi.dim):
        vals = {}
        for sign in (+1.0, -1.0):
            raw = psi.raw.copy()
            raw[i] += sign * h
            theta = _inner_solution(
                problem, psi.replace(raw), noise, theta0, inner_epochs, inner_lr, grad_tol
            )
            vals[sign] = val_loss_sum(theta, problem.val_data, problem.model_spec)
        grad[i] = (vals[+1.0] - vals[-1.0]) / (2.0 * h)
    return grad


def run_oracle(cfg: ExperimentConfig, h: float = 1e-2, psi_raw=None) -> dict:
    """Oracle entry point shared by the CLI and the service."""
    task = tasks.build_task(cfg.task)
    problem = Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task, cfg.val_size),
        test_data=[],
    )
    psi = task.psi0() if psi_raw is None else task.psi0().replace(np.asarray(psi_raw, float))
    grad = oracle_bilevel_grad(
        problem,
        psi,
        h=h,
        K=cfg.K if cfg.K is not None else task.K,
        init_seed=cfg.init_seed if cfg.init_seed is not None else task.init_seed,
        noise_seed=cfg.seed,
        inner_lr=task.inner_lr,
    )
    return {
        "task": cfg.task,
        "h": h,
        "psi": [float(v) for v in psi.raw],
        "gradient": [float(g) for g in grad],
    }
