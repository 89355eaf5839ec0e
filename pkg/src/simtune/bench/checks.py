"""Verification suite shared by the CLI (`simtune check`) and the
acceptance tests.

``fast`` covers the numerical contracts (gradients, HVPs, CG, Newton step,
score function, the analytic toy hypergradient, the identity-Hessian mode
coincidence, a reduced oracle comparison, and metrics determinism) in under
a minute. ``full`` adds the multi-seed benchmark medians: oracle agreement
over 10 random psi, recovery of the hidden gaussian-match parameters, the
sample-efficiency ordering against the black-box baselines, and the
approximation ladder (per-iteration wall time, no-validation quality).
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import autosim, baselines, diffcore as dc, hypergrad as hg, model as md, tasks
from ..autosim import OuterConfig, Problem
from ..simgen import DataPoint, render_dataset, sample_latents, score_matrix
from .config import parse_config
from .oracle import oracle_bilevel_grad
from .runner import metrics_body_without_wall, read_metrics, run_experiment

BENCH_SEEDS = (0, 1, 2, 3, 4)

# gaussian-match convergence (criterion: |mu - 2| < 0.1, 300 iters, K=64)
CONV_ITERS = 300
CONV_K = 64
CONV_TOL = 0.1

# source-mixture efficiency benchmark
EFF_TARGET = 2.0
EFF_AUTOSIM_ITERS = 200
EFF_LTS_ITERS = 200
EFF_RANDOM_ITERS = 600
EFF_MARGIN = 2.0

LADDER_ITERS = 120


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Componentwise |a-b| relative to |b|, floored at 1e-3 of the largest
    reference component so near-zero components compare sanely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    floor = 1e-3 * max(float(np.abs(b).max()), 1e-12)
    return float(np.max(np.abs(a - b) / (np.abs(b) + floor)))


def _random_mlp(rng: np.random.Generator):
    shapes = [(2, 4, 1), (3, 5, 2), (1, 6, 1), (2, 3, 3, 2), (4, 4, 3)]
    sizes = shapes[rng.integers(len(shapes))]
    activation = "tanh" if rng.uniform() < 0.7 else "relu"
    loss = "mse" if rng.uniform() < 0.7 else "cross_entropy"
    spec = md.ModelSpec(layer_sizes=sizes, activation=activation, loss_kind=loss)
    n_points = 8
    data = []
    for _ in range(n_points):
        x = rng.standard_normal(sizes[0])
        if loss == "mse":
            y = rng.standard_normal(sizes[-1])
        else:
            y = int(rng.integers(sizes[-1]))
        data.append(DataPoint(x, y))
    theta = md.init_model(spec, int(rng.integers(1 << 30)))
    theta = theta.replace(theta.values + 0.1 * rng.standard_normal(theta.dim))
    return spec, data, theta


def fd_gradient(f, theta, h: float) -> np.ndarray:
    out = np.zeros(theta.dim)
    base = theta.values
    for i in range(theta.dim):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        fp = float(f(dc.Tensor(plus)).value)
        fm = float(f(dc.Tensor(minus)).value)
        out[i] = (fp - fm) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# fast checks


def check_gradient_fd() -> tuple[bool, str]:
    """20 random small-MLP losses: reverse-mode grad vs central differences."""
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(20):
        spec, data, theta = _random_mlp(rng)
        f = md.make_loss(data, spec)
        g = dc.gradient(f, theta).values
        g_fd = fd_gradient(f, theta, h=1e-5)
        worst = max(worst, max_rel_err(g, g_fd))
    return worst < 1e-5, f"max rel err {worst:.2e} (< 1e-5)"


def check_hvp_fd() -> tuple[bool, str]:
    """HVPs vs finite differences of gradients."""
    rng = np.random.default_rng(4321)
    worst = 0.0
    for _ in range(20):
        spec, data, theta = _random_mlp(rng)
        f = md.make_loss(data, spec)
        v = rng.standard_normal(theta.dim)
        h = 1e-4
        hv = dc.hvp(f, theta, v).values
        gp = dc.gradient(f, theta.replace(theta.values + h * v)).values
        gm = dc.gradient(f, theta.replace(theta.values - h * v)).values
        hv_fd = (gp - gm) / (2.0 * h)
        worst = max(worst, max_rel_err(hv, hv_fd))
    return worst < 1e-4, f"max rel err {worst:.2e} (< 1e-4)"


def check_cg_dense() -> tuple[bool, str]:
    """20 random SPD systems (n <= 50): CG vs dense solve, 1e-8 residual
    within n iterations."""
    rng = np.random.default_rng(99)
    worst_res = 0.0
    worst_err = 0.0
    for _ in range(20):
        n = int(rng.integers(20, 51))
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        eigs = rng.uniform(0.8, 2.0, size=n)
        A = Q @ np.diag(eigs) @ Q.T
        x_true = rng.standard_normal(n)
        g = A @ x_true
        res = hg.cg_solve(
            hg.HvpOperator.from_matrix(A),
            g,
            hg.CgConfig(max_iters=n, rel_tolerance=1e-10),
        )
        direct = np.linalg.solve(A, g)
        worst_res = max(worst_res, float(np.linalg.norm(A @ res.v - g) / np.linalg.norm(g)))
        worst_err = max(worst_err, float(np.linalg.norm(res.v - direct) / np.linalg.norm(direct)))
        if res.iters_used > n or res.truncated:
            return False, f"CG used {res.iters_used} iters on n={n}"
    ok = worst_res <= 1e-8 and worst_err <= 1e-8
    return ok, f"max rel residual {worst_res:.2e}, max err vs dense {worst_err:.2e} (<= 1e-8)"


def check_newton_exact() -> tuple[bool, str]:
    """Quadratic inner losses: the undamped Newton step lands on the optimum."""
    from ..simgen import DataPoint

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(5):
        d = 4
        m = 24
        spec = md.ModelSpec(layer_sizes=(d, 1))
        X = rng.standard_normal((m, d))
        w_true = rng.standard_normal(d)
        y = X @ w_true + 0.5
        data = [DataPoint(X[i], np.array([y[i]])) for i in range(m)]
        theta = md.init_model(spec, int(rng.integers(1 << 30)))
        f = md.make_loss(data, spec)
        g_train = dc.gradient(f, theta).values
        op = hg.HvpOperator.from_dataset(theta, data, spec, lam=0.0)
        step = hg.delta_theta(
            "exact_quadratic", op, g_train, hg.CgConfig(max_iters=4 * (d + 1), rel_tolerance=1e-14)
        )
        landed = theta.values + step.delta_theta
        Xb = np.hstack([X, np.ones((m, 1))])
        opt, *_ = np.linalg.lstsq(Xb, y, rcond=None)
        worst = max(worst, float(np.max(np.abs(landed - opt))))
    return worst <= 1e-10, f"max distance to optimum {worst:.2e} (<= 1e-10)"


def _toy_setup(mu_raw: float):
    task = tasks.build_task("toy-1d")
    problem = Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task),
        test_data=[],
    )
    psi = task.psi0().replace(np.array([mu_raw]))
    theta_layout = md.layout(task.model)
    theta = dc.ParamVector(np.array([0.0, mu_raw]), theta_layout)  # b at the inner optimum
    return task, problem, psi, theta


def check_toy_hypergradient() -> tuple[bool, str]:
    """Monte-Carlo hypergradient on the 1-d toy equals 2(mu - mu*) within 5%;
    score estimator is zero-mean."""
    mu, mu_star = 1.0, 0.0
    task, problem, psi, theta = _toy_setup(mu)
    rng = np.random.default_rng(2024)
    latents = sample_latents(psi, problem.sim, 10000, rng)
    report = hg.hypergradient(
        "exact_quadratic",
        theta,
        psi,
        latents,
        problem.sim,
        problem.model_spec,
        problem.val_data,
        lam=0.0,
    )
    expected = 2.0 * (mu - mu_star)
    err = abs(float(report.grad_psi[0]) - expected)
    ok_grad = err <= 0.05 * abs(expected)

    big = sample_latents(psi, problem.sim, 100000, np.random.default_rng(77))
    S = score_matrix(psi, problem.sim, big)
    mean_norm = float(np.linalg.norm(S.mean(axis=0)))
    ok_score = mean_norm < 5.0 / np.sqrt(100000)
    return (
        ok_grad and ok_score,
        f"hypergrad {float(report.grad_psi[0]):.4f} vs {expected:.1f} "
        f"(err {err:.4f} <= {0.05 * abs(expected):.2f}); score mean norm {mean_norm:.2e}",
    )


def check_table1_coincidence() -> tuple[bool, str]:
    """With H forced to identity and lam=0, exact_quadratic == linear."""
    task, problem, psi, theta = _toy_setup(0.5)
    rng = np.random.default_rng(5)
    latents = sample_latents(psi, problem.sim, 64, rng)
    dim = int(md.trainable_indices(problem.model_spec).sum())
    identity = hg.HvpOperator.from_matrix(np.eye(dim), lam=0.0)
    kwargs = dict(
        sim=problem.sim,
        spec=problem.model_spec,
        val_data=problem.val_data,
        lam=0.0,
    )
    g_exact = hg.hypergradient(
        "exact_quadratic", theta, psi, latents, hvp_op=identity, **kwargs
    ).grad_psi
    g_linear = hg.hypergradient("linear", theta, psi, latents, **kwargs).grad_psi
    diff = float(np.max(np.abs(g_exact - g_linear)))
    return diff <= 1e-10, f"max |exact - linear| = {diff:.2e} (<= 1e-10)"


def _gaussian_match_problem():
    task = tasks.build_task("gaussian-match")
    return task, Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task),
        test_data=[],
    )


def _oracle_cosines(n_psi: int, K: int, inner_epochs: int, seed: int, mode: str) -> list[float]:
    task, problem = _gaussian_match_problem()
    rng = np.random.default_rng(seed)
    cosines = []
    for i in range(n_psi):
        raw = np.array([rng.uniform(-2.0, 1.0), rng.uniform(-0.5, 1.5)])
        psi = task.psi0().replace(raw)
        latents = sample_latents(psi, problem.sim, K, np.random.default_rng(seed + 100 + i))
        dataset = render_dataset(latents, problem.sim)
        theta0 = md.init_model(problem.model_spec, task.init_seed)
        train_cfg = md.TrainConfig(epochs=40, batch_size=K, lr=task.inner_lr, seed=0)
        theta_hat = md.fine_tune(theta0, dataset, train_cfg, problem.model_spec)
        report = hg.hypergradient(
            mode,
            theta_hat,
            psi,
            latents,
            problem.sim,
            problem.model_spec,
            problem.val_data,
            lam=0.0,
            train_data=dataset,
        )
        ora = oracle_bilevel_grad(
            problem,
            psi,
            h=1e-2,
            K=K,
            inner_epochs=inner_epochs,
            inner_lr=task.inner_lr,
            init_seed=task.init_seed,
            noise_seed=seed + 200 + i,
        )
        num = float(report.grad_psi @ ora)
        den = float(np.linalg.norm(report.grad_psi) * np.linalg.norm(ora))
        cosines.append(num / den if den > 0 else 0.0)
    return cosines


def check_oracle_agreement_fast() -> tuple[bool, str]:
    """Reduced oracle comparison (3 psi, exact and linear modes)."""
    cos_exact = _oracle_cosines(3, K=2048, inner_epochs=120, seed=31, mode="exact_quadratic")
    cos_linear = _oracle_cosines(3, K=2048, inner_epochs=120, seed=31, mode="linear")
    low = min(min(cos_exact), min(cos_linear))
    return low > 0.9, f"min cosine {low:.3f} (> 0.9) exact={cos_exact} linear={cos_linear}"


def check_oracle_agreement_full() -> tuple[bool, str]:
    """Criterion: cosine similarity > 0.9 across 10 random psi (exact mode)."""
    cosines = _oracle_cosines(10, K=4096, inner_epochs=200, seed=131, mode="exact_quadratic")
    low = min(cosines)
    return low > 0.9, f"min cosine over 10 psi {low:.3f} (> 0.9)"


def check_determinism() -> tuple[bool, str]:
    """Identical config+seed => byte-identical metrics bodies (wall column
    excluded); ledger equals reported cumulative samples."""
    doc = {
        "task": "toy-1d",
        "method": "autosimulate",
        "seed": 3,
        "K": 8,
        "budget": {"iterations": 4},
    }
    cfg = parse_config(doc)
    with tempfile.TemporaryDirectory() as tmp:
        p1 = run_experiment(cfg, Path(tmp) / "a")
        p2 = run_experiment(cfg, Path(tmp) / "b")
        body1 = metrics_body_without_wall(p1)
        body2 = metrics_body_without_wall(p2)
        rows = read_metrics(p1)
        import yaml

        summary = yaml.safe_load((p1.parent / (p1.stem + ".summary.yaml")).read_text())
    same = body1 == body2
    ledger_ok = summary["ledger_samples"] == rows[-1]["cumulative_samples"] == summary["total_samples"]
    return same and ledger_ok, (
        f"bodies identical: {same}; ledger {summary['ledger_samples']} == "
        f"reported {rows[-1]['cumulative_samples']}"
    )


# ---------------------------------------------------------------------------
# full-level benchmark checks


@lru_cache(maxsize=None)
def _convergence_runs() -> tuple[float, ...]:
    task, problem = _gaussian_match_problem()
    finals = []
    for seed in BENCH_SEEDS:
        cfg = OuterConfig(
            iterations=CONV_ITERS,
            K=CONV_K,
            mode="exact_quadratic",
            lam=task.lam,
            alpha=task.alpha,
            outer_optimizer=task.outer_optimizer,
            seed=seed,
            inner_epochs=task.inner_epochs,
            inner_lr=task.inner_lr,
            inner_batch=task.inner_batch,
        )
        theta0 = md.init_model(problem.model_spec, task.init_seed)
        state = autosim.run(problem, cfg, task.psi0(), theta0)
        finals.append(float(state.psi.raw[0]))
    return tuple(finals)


def check_convergence() -> tuple[bool, str]:
    """gaussian-match recovers the hidden mu* = 2 (5-seed median)."""
    finals = _convergence_runs()
    errs = [abs(mu - 2.0) for mu in finals]
    med = float(np.median(errs))
    return med < CONV_TOL, f"median |mu - 2| = {med:.3f} (< {CONV_TOL}); finals {[f'{m:.3f}' for m in finals]}"


def _mixture_problem():
    task = tasks.build_task("source-mixture")
    return task, Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task),
        test_data=[],
    )


def _samples_to_target(records, target: float) -> float:
    for r in records:
        if r.val_loss <= target:
            return float(r.cumulative_samples)
    return float("inf")


@lru_cache(maxsize=None)
def _efficiency_runs():
    """samples-to-target per method per seed on source-mixture."""
    task, problem = _mixture_problem()
    out: dict[str, list[float]] = {"exact": [], "approx": [], "lts": [], "random": []}
    for seed in BENCH_SEEDS:
        for label, mode in (("exact", "exact_quadratic"), ("approx", "approx_quadratic")):
            cfg = OuterConfig(
                iterations=EFF_AUTOSIM_ITERS,
                K=task.K,
                mode=mode,
                lam=task.lam,
                alpha=task.alpha,
                outer_optimizer=task.outer_optimizer,
                seed=seed,
                inner_epochs=task.inner_epochs,
                inner_lr=task.inner_lr,
                inner_batch=task.inner_batch,
                target_val_loss=EFF_TARGET,
            )
            theta0 = md.init_model(problem.model_spec, task.init_seed)
            state = autosim.run(problem, cfg, task.psi0(), theta0)
            out[label].append(_samples_to_target(state.history, EFF_TARGET))
        lts_cfg = baselines.LtsConfig(
            iterations=EFF_LTS_ITERS,
            population=4,
            sigma=task.lts_sigma,
            lr=task.lts_lr,
            seed=seed,
            evaluation=baselines.EvalConfig(
                K=task.K,
                epochs=task.blackbox_epochs,
                batch_size=task.inner_batch,
                lr=task.inner_lr,
                init_seed=task.init_seed,
            ),
            target_val_loss=EFF_TARGET,
        )
        res = baselines.lts_reinforce(problem, lts_cfg, task.psi0())
        out["lts"].append(_samples_to_target(res.records, EFF_TARGET))
        rnd_cfg = baselines.RandomSearchConfig(
            iterations=EFF_RANDOM_ITERS,
            low=task.search_low,
            high=task.search_high,
            seed=seed,
            evaluation=baselines.EvalConfig(
                K=task.K,
                epochs=task.blackbox_epochs,
                batch_size=task.inner_batch,
                lr=task.inner_lr,
                init_seed=task.init_seed,
            ),
            target_val_loss=EFF_TARGET,
        )
        res = baselines.random_search(problem, rnd_cfg)
        out["random"].append(_samples_to_target(res.records, EFF_TARGET))
    return {k: tuple(v) for k, v in out.items()}


def check_efficiency() -> tuple[bool, str]:
    """AutoSimulate reaches the target with >= 2x fewer samples than the
    black-box baselines (5-seed median)."""
    runs = _efficiency_runs()
    med = {k: float(np.median(v)) for k, v in runs.items()}
    ok = all(
        EFF_MARGIN * med[ours] <= med[base]
        for ours in ("exact", "approx")
        for base in ("lts", "random")
    ) and np.isfinite(med["exact"]) and np.isfinite(med["approx"])
    return ok, f"median samples-to-target {med}"


@lru_cache(maxsize=None)
def _ladder_runs():
    """Fixed-length source-mixture runs for each mode (no early stop)."""
    task, problem = _mixture_problem()
    out = {}
    for mode in ("exact_quadratic", "approx_quadratic", "linear", "no_val"):
        finals = []
        iter_times = []
        for seed in BENCH_SEEDS:
            cfg = OuterConfig(
                iterations=LADDER_ITERS,
                K=task.K,
                mode=mode,
                lam=task.lam,
                alpha=task.alpha,
                outer_optimizer=task.outer_optimizer,
                seed=seed,
                inner_epochs=task.inner_epochs,
                inner_lr=task.inner_lr,
                inner_batch=task.inner_batch,
            )
            theta0 = md.init_model(problem.model_spec, task.init_seed)
            state = autosim.run(problem, cfg, task.psi0(), theta0)
            finals.append(state.history[-1].val_loss)
            walls = [r.wall_seconds for r in state.history]
            iter_times.extend(np.diff([0.0] + walls))
        out[mode] = {
            "final_val_median": float(np.median(finals)),
            "iter_time_median": float(np.median(iter_times)),
        }
    return out


def check_ladder() -> tuple[bool, str]:
    """approx_quadratic iterates strictly faster than exact_quadratic, and
    no_val ends at a worse validation loss than every validation-using mode."""
    runs = _ladder_runs()
    t_exact = runs["exact_quadratic"]["iter_time_median"]
    t_approx = runs["approx_quadratic"]["iter_time_median"]
    time_ok = t_approx < t_exact
    noval = runs["no_val"]["final_val_median"]
    quality_ok = all(
        noval > runs[m]["final_val_median"]
        for m in ("exact_quadratic", "approx_quadratic", "linear")
    )
    detail = (
        f"iter time approx {t_approx * 1e3:.2f}ms < exact {t_exact * 1e3:.2f}ms: {time_ok}; "
        f"final val no_val {noval:.2f} vs "
        + ", ".join(f"{m}={runs[m]['final_val_median']:.2f}" for m in ("exact_quadratic", "approx_quadratic", "linear"))
    )
    return time_ok and quality_ok, detail


FAST_CHECKS = (
    ("gradient_fd", check_gradient_fd),
    ("hvp_fd", check_hvp_fd),
    ("cg_dense", check_cg_dense),
    ("newton_exact", check_newton_exact),
    ("toy_hypergradient", check_toy_hypergradient),
    ("table1_coincidence", check_table1_coincidence),
    ("oracle_agreement_fast", check_oracle_agreement_fast),
    ("determinism", check_determinism),
)

FULL_CHECKS = (
    ("oracle_agreement_full", check_oracle_agreement_full),
    ("convergence", check_convergence),
    ("efficiency", check_efficiency),
    ("ladder", check_ladder),
)


def check_suite(level: str = "fast") -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    selected = FAST_CHECKS + (FULL_CHECKS if level == "full" else ())
    results = []
    for name, fn in selected:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as err:  # a crashed check is a failed check
            passed, detail = False, f"{type(err).__name__}: {err}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return results


def render_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        lines.append(f"{flag}  {r.name:<24} {r.seconds:7.2f}s  {r.detail}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)
