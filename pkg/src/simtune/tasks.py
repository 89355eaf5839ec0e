"""Shipped benchmark tasks.

Each task bundles a simulator, a task model, a hidden ground-truth psi* used
to generate validation/test data, and tuned defaults for the optimizers. The
validation and test sets, and the model init, use task-fixed seeds so that
runs with different sampling seeds stay comparable (and so that val-loss
targets mean the same thing for every method).

gaussian-match   learn (mean, scale) of a 1-d Gaussian over point locations;
                 the model is a linear unit whose weight is frozen at its
                 random init, so training fits only the bias. Validation
                 comes from hidden psi* = (mu*=2, sigma*=0.5).
source-mixture   learn an 8-way categorical over fixed data sources of
                 differing slope/bias/noise around a linear ground truth;
                 validation comes from the single matched source.
toy-1d           constant predictor against targets drawn from N(mu, 1);
                 validation is a point mass at mu*. The analytic outer
                 gradient is 2(mu - mu*), which the tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec
from .simgen import (
    CategoricalBlock,
    GaussianBlock,
    LatentSample,
    SimParams,
    SimulatorSpec,
    draw_base_noise,
    latents_from_noise,
    make_params,
    render_dataset,
    softplus_inv,
)

TASK_NAMES = ("gaussian-match", "source-mixture", "toy-1d")

VAL_SEED = 90001
TEST_SEED = 90002


@dataclass(frozen=True)
class Task:
    name: str
    sim: SimulatorSpec
    model: ModelSpec
    psi0_raw: tuple[float, ...]
    init_seed: int
    val_size: int
    test_size: int
    # eval data: "sample" draws from hidden psi*, "mean_point" renders the
    # latent mean exactly (degenerate validation used by the analytic toy)
    eval_kind: str = "sample"
    target_val_loss: float | None = None
    # outer-loop defaults
    K: int = 64
    alpha: float = 0.05
    outer_optimizer: str = "adam"
    lam: float = 1e-2
    clip_norm: float = 10.0
    # inner-loop defaults
    inner_epochs: int = 2
    inner_lr: float = 0.2
    inner_batch: int = 4096
    inner_optimizer: str = "sgd"
    # black-box defaults
    blackbox_epochs: int = 40
    lts_population: int = 4
    lts_sigma: float = 0.1
    lts_lr: float = 1e-3
    search_low: tuple[float, ...] = ()
    search_high: tuple[float, ...] = ()

    def psi0(self) -> SimParams:
        return make_params(self.sim, np.array(self.psi0_raw))

    def psi_star(self) -> SimParams:
        if self.sim.hidden_psi_star is None:
            raise ValueError(f"task {self.name} has no hidden psi*")
        return make_params(self.sim, np.array(self.sim.hidden_psi_star))


SOURCE_BETA = (1.0, -0.5, 0.25, 0.8, -0.3, 0.6)

# (slope, bias, noise): source 0 matches the validation generator; source 1
# has the lowest bias+slope pull and is where the no-validation surrogate
# collapses; the rest vary quality and bias.
SOURCES = (
    {"slope": 1.0, "bias": 0.0, "noise": 0.05},
    {"slope": 1.0, "bias": -4.0, "noise": 0.05},
    {"slope": 1.0, "bias": 3.0, "noise": 0.05},
    {"slope": 0.0, "bias": 0.0, "noise": 0.05},
    {"slope": 1.0, "bias": 0.0, "noise": 3.0},
    {"slope": -1.0, "bias": 0.0, "noise": 0.05},
    {"slope": 0.3, "bias": 1.0, "noise": 0.5},
    {"slope": 2.0, "bias": -1.0, "noise": 1.0},
)


def _gaussian_match() -> Task:
    sim = SimulatorSpec(
        latent_blocks=(GaussianBlock(dim=1, mean="mu", scale="sigma"),),
        renderer="affine_point",
        renderer_constants={"x_scale": 1.0, "x_shift": 0.0, "y_scale": 0.0, "y_shift": 0.0},
        hidden_psi_star=(2.0, float(softplus_inv(0.5))),
    )
    return Task(
        name="gaussian-match",
        sim=sim,
        # weight frozen at its random init; only the bias trains, so the
        # inner optimum is b = -w0 * mean(u) and matching distributions wins
        model=ModelSpec(layer_sizes=(1, 1), trainable_mask=(False, True)),
        psi0_raw=(0.0, 0.0),
        init_seed=9,
        val_size=128,
        test_size=128,
        target_val_loss=None,  # filled once calibrated below
        K=64,
        alpha=0.05,
        inner_epochs=2,
        inner_lr=0.4,
        blackbox_epochs=30,
        lts_lr=1e-2,
        search_low=(-4.0, -3.0),
        search_high=(4.0, 2.0),
    )


def _source_mixture() -> Task:
    d = len(SOURCE_BETA)
    sim = SimulatorSpec(
        latent_blocks=(
            CategoricalBlock(cardinality=len(SOURCES), logits="logits"),
            GaussianBlock(dim=d + 1, mean=tuple([0.0] * (d + 1)), scale=tuple([1.0] * (d + 1))),
        ),
        renderer="source_mixture",
        renderer_constants={"beta": list(SOURCE_BETA), "sources": list(SOURCES)},
        hidden_psi_star=tuple([30.0] + [0.0] * (len(SOURCES) - 1)),
    )
    return Task(
        name="source-mixture",
        sim=sim,
        model=ModelSpec(layer_sizes=(d, 1)),
        psi0_raw=tuple([0.0] * len(SOURCES)),
        init_seed=11,
        val_size=128,
        test_size=128,
        target_val_loss=2.0,
        K=32,
        alpha=0.1,
        inner_epochs=3,
        inner_lr=0.15,
        inner_batch=16,
        blackbox_epochs=40,
        lts_lr=1e-2,
        search_low=tuple([-3.0] * len(SOURCES)),
        search_high=tuple([3.0] * len(SOURCES)),
    )


def _toy_1d() -> Task:
    sim = SimulatorSpec(
        latent_blocks=(GaussianBlock(dim=1, mean="mu", scale=(1.0,)),),
        renderer="affine_point",
        renderer_constants={"x_scale": 0.0, "x_shift": 0.0, "y_scale": 1.0, "y_shift": 0.0},
        hidden_psi_star=(0.0,),
    )
    return Task(
        name="toy-1d",
        sim=sim,
        model=ModelSpec(layer_sizes=(1, 1), trainable_mask=(False, True)),
        psi0_raw=(1.0,),
        init_seed=3,
        val_size=1,
        test_size=16,
        eval_kind="mean_point",
        K=64,
        alpha=0.05,
        outer_optimizer="sgd",
        inner_epochs=30,
        inner_lr=0.3,
        search_low=(-4.0,),
        search_high=(4.0,),
    )


_BUILDERS = {
    "gaussian-match": _gaussian_match,
    "source-mixture": _source_mixture,
    "toy-1d": _toy_1d,
}


def build_task(name: str) -> Task:
    if name not in _BUILDERS:
        raise KeyError(f"unknown task {name!r}; available: {sorted(_BUILDERS)}")
    return _BUILDERS[name]()


def eval_data(task: Task, size: int, seed: int):
    """Labelled data from the hidden psi* (never charged to the ledger)."""
    psi_star = task.psi_star()
    if task.eval_kind == "mean_point":
        # degenerate validation: render the latent mean exactly, `size` times
        from .simgen import project

        mean = project(psi_star)[task.sim.latent_blocks[0].mean]
        latents = [LatentSample(mean.copy(), ()) for _ in range(size)]
    else:
        rng = np.random.default_rng(seed)
        latents = latents_from_noise(psi_star, task.sim, draw_base_noise(task.sim, size, rng))
    return render_dataset(latents, task.sim)


def validation_data(task: Task, size: int | None = None):
    return eval_data(task, size or task.val_size, VAL_SEED)


def test_data(task: Task, size: int | None = None):
    return eval_data(task, size or task.test_size, TEST_SEED)
