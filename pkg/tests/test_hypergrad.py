import numpy as np
import pytest

from simtune import diffcore as dc
from simtune import hypergrad as hg
from simtune import model as md
from simtune import tasks
from simtune.autosim import Problem
from simtune.simgen import DataPoint, sample_latents, softmax


def toy_setup(mu=1.0):
    task = tasks.build_task("toy-1d")
    problem = Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task),
        test_data=[],
    )
    psi = task.psi0().replace(np.array([mu]))
    theta = dc.ParamVector(np.array([0.0, mu]), md.layout(task.model))
    return task, problem, psi, theta


def spd_system(n, seed, lo=0.8, hi=2.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = Q @ np.diag(rng.uniform(lo, hi, size=n)) @ Q.T
    g = A @ rng.standard_normal(n)
    return A, g


def test_cg_identity_system():
    res = hg.cg_solve(hg.HvpOperator.from_matrix(np.eye(2)), np.array([7.0, -2.0]))
    assert np.allclose(res.v, [7.0, -2.0], atol=1e-12)
    assert not res.truncated


def test_cg_diagonal_system():
    res = hg.cg_solve(hg.HvpOperator.from_matrix(np.diag([2.0, 4.0])), np.array([2.0, 4.0]))
    assert np.allclose(res.v, [1.0, 1.0], atol=1e-10)


def test_cg_zero_rhs_short_circuits():
    res = hg.cg_solve(hg.HvpOperator.from_matrix(np.eye(3)), np.zeros(3))
    assert np.array_equal(res.v, np.zeros(3))
    assert res.iters_used == 0


def test_cg_matches_dense_solve():
    A, g = spd_system(20, seed=0)
    res = hg.cg_solve(
        hg.HvpOperator.from_matrix(A), g, hg.CgConfig(max_iters=20, rel_tolerance=1e-10)
    )
    direct = np.linalg.solve(A, g)
    assert np.linalg.norm(res.v - direct) / np.linalg.norm(direct) < 1e-8
    assert res.iters_used <= 20


def test_cg_negative_curvature_truncates():
    A = np.diag([1.0, -1.0])
    g = np.array([1.0, 1.0])
    res = hg.cg_solve(hg.HvpOperator.from_matrix(A), g, hg.CgConfig(negative_curvature_policy="truncate"))
    assert res.truncated


def test_cg_negative_curvature_raises_damping():
    A = np.diag([1.0, -1.0])
    g = np.array([1.0, 1.0])
    res = hg.cg_solve(
        hg.HvpOperator.from_matrix(A), g, hg.CgConfig(negative_curvature_policy="raise_damping")
    )
    assert not res.truncated
    assert res.lam > 0.0
    assert np.allclose((A + res.lam * np.eye(2)) @ res.v, g, atol=1e-5 * np.linalg.norm(g))


def test_hvp_operator_symmetry_on_dataset():
    spec = md.ModelSpec(layer_sizes=(2, 4, 1))
    rng = np.random.default_rng(1)
    data = [DataPoint(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(8)]
    theta = md.init_model(spec, 0)
    op = hg.HvpOperator.from_dataset(theta, data, spec, lam=0.0)
    u = rng.standard_normal(theta.dim)
    v = rng.standard_normal(theta.dim)
    lhs = float(u @ op.apply(v))
    rhs = float(v @ op.apply(u))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs), 1e-12)


def test_val_gradient_zero_at_optimum():
    _, problem, _, _ = toy_setup()
    theta_opt = dc.ParamVector(np.array([0.0, 0.0]), md.layout(problem.model_spec))
    g = hg.val_gradient(theta_opt, problem.val_data, problem.model_spec)
    assert np.array_equal(g, np.zeros(2))


def test_val_gradient_single_point_analytic():
    _, problem, _, _ = toy_setup()
    theta = dc.ParamVector(np.array([0.0, 3.0]), md.layout(problem.model_spec))
    val = [DataPoint(np.zeros(1), np.array([1.0]))]
    g = hg.val_gradient(theta, val, problem.model_spec)
    assert g[1] == pytest.approx(4.0, abs=1e-12)  # d/db (b-1)^2 at b=3


def test_val_gradient_sums_over_points():
    _, problem, _, _ = toy_setup()
    theta = dc.ParamVector(np.array([0.0, 3.0]), md.layout(problem.model_spec))
    val = [DataPoint(np.zeros(1), np.array([1.0]))] * 3
    g = hg.val_gradient(theta, val, problem.model_spec)
    assert g[1] == pytest.approx(12.0, abs=1e-12)


def test_per_sample_single_latent_equals_dataset_gradient():
    task, problem, psi, theta = toy_setup()
    latents = sample_latents(psi, problem.sim, 1, np.random.default_rng(0))
    grads = hg.per_sample_train_grads(theta, latents, problem.sim, problem.model_spec)
    from simtune.simgen import render

    point = render(latents[0], problem.sim)
    f = md.make_loss([point], problem.model_spec)
    assert np.allclose(grads[0], dc.gradient(f, theta).values, atol=1e-15)


def test_per_sample_duplicate_latents_identical():
    task, problem, psi, theta = toy_setup()
    s = sample_latents(psi, problem.sim, 1, np.random.default_rng(5))[0]
    grads = hg.per_sample_train_grads(theta, [s, s], problem.sim, problem.model_spec)
    assert np.array_equal(grads[0], grads[1])


def test_per_sample_mean_equals_mean_loss_gradient():
    task, problem, psi, theta = toy_setup()
    latents = sample_latents(psi, problem.sim, 8, np.random.default_rng(2))
    grads = hg.per_sample_train_grads(theta, latents, problem.sim, problem.model_spec)
    from simtune.simgen import render_dataset

    dataset = render_dataset(latents, problem.sim)
    f = md.make_loss(dataset, problem.model_spec, reduction="mean")
    mean_grad = dc.gradient(f, theta).values
    assert np.max(np.abs(np.mean(grads, axis=0) - mean_grad)) < 1e-12


def test_jvp_dots_match_per_sample_gradients():
    spec = md.ModelSpec(layer_sizes=(3, 5, 2), activation="relu")
    rng = np.random.default_rng(8)
    data = [DataPoint(rng.standard_normal(3), rng.standard_normal(2)) for _ in range(10)]
    theta = md.init_model(spec, 1)
    w = rng.standard_normal(theta.dim)
    _, dots = md.per_example_loss_jvp(data, spec, theta.values, w)
    for i, p in enumerate(data):
        g = dc.gradient_values(md.make_loss([p], spec), theta.values)
        assert dots[i] == pytest.approx(float(g @ w), rel=1e-10, abs=1e-12)


def test_delta_theta_linear_mode():
    step = hg.delta_theta("linear", None, np.array([1.0, -2.0]))
    assert np.array_equal(step.delta_theta, [-1.0, 2.0])


def test_delta_theta_exact_identity_hessian():
    g = np.array([0.3, -0.7])
    step = hg.delta_theta("exact_quadratic", hg.HvpOperator.from_matrix(np.eye(2)), g)
    assert np.allclose(step.delta_theta, -g, atol=1e-12)


def test_delta_theta_no_val_constant():
    step = hg.delta_theta("no_val", None, np.zeros(3))
    assert np.array_equal(step.delta_theta, np.ones(3))


def test_newton_step_exact_on_quadratic():
    # l(b) = (b - a)^2 from b = a'; one step lands on a
    spec = md.ModelSpec(layer_sizes=(1, 1), trainable_mask=(False, True))
    theta = dc.ParamVector(np.array([0.0, -1.3]), md.layout(spec))
    a = 2.4
    data = [DataPoint(np.zeros(1), np.array([a]))]
    f = md.make_loss(data, spec)
    g_full = dc.gradient(f, theta).values
    mask = md.trainable_indices(spec)
    op = hg.HvpOperator.from_dataset(theta, data, spec, lam=0.0)
    step = hg.delta_theta("exact_quadratic", op, g_full[mask], hg.CgConfig(rel_tolerance=1e-14))
    assert theta.values[1] + step.delta_theta[0] == pytest.approx(a, abs=1e-10)


def test_hypergradient_toy_analytic():
    task, problem, psi, theta = toy_setup(mu=1.0)
    latents = sample_latents(psi, problem.sim, 10000, np.random.default_rng(2024))
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
    assert report.grad_psi[0] == pytest.approx(2.0, abs=0.1)
    assert report.per_sample_dot.shape == (10000,)
    assert report.cg_iters >= 1


def test_hypergradient_zero_val_gradient_gives_zero():
    task, problem, psi, _ = toy_setup(mu=0.5)
    theta_opt = dc.ParamVector(np.array([0.0, 0.0]), md.layout(problem.model_spec))
    latents = sample_latents(psi, problem.sim, 32, np.random.default_rng(3))
    for mode in ("exact_quadratic", "approx_quadratic", "linear"):
        report = hg.hypergradient(
            mode, theta_opt, psi, latents, problem.sim, problem.model_spec, problem.val_data
        )
        assert np.array_equal(report.grad_psi, np.zeros(1)), mode


def test_hypergradient_rejects_empty_latents():
    task, problem, psi, theta = toy_setup()
    with pytest.raises(ValueError):
        hg.hypergradient(
            "linear", theta, psi, [], problem.sim, problem.model_spec, problem.val_data
        )


def test_hypergradient_identity_hessian_matches_linear():
    task, problem, psi, theta = toy_setup(mu=0.7)
    latents = sample_latents(psi, problem.sim, 64, np.random.default_rng(4))
    dim = int(md.trainable_indices(problem.model_spec).sum())
    identity = hg.HvpOperator.from_matrix(np.eye(dim), lam=0.0)
    g_exact = hg.hypergradient(
        "exact_quadratic",
        theta,
        psi,
        latents,
        problem.sim,
        problem.model_spec,
        problem.val_data,
        lam=0.0,
        hvp_op=identity,
    ).grad_psi
    g_linear = hg.hypergradient(
        "linear", theta, psi, latents, problem.sim, problem.model_spec, problem.val_data, lam=0.0
    ).grad_psi
    assert np.max(np.abs(g_exact - g_linear)) <= 1e-10


def test_score_estimator_unbiased_over_repetitions():
    # 200 independent K=64 estimates: mean within 3 standard errors of 2.0
    task, problem, psi, theta = toy_setup(mu=1.0)
    estimates = []
    for rep in range(200):
        latents = sample_latents(psi, problem.sim, 64, np.random.default_rng(10_000 + rep))
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
        estimates.append(float(report.grad_psi[0]))
    mean = float(np.mean(estimates))
    se = float(np.std(estimates, ddof=1) / np.sqrt(len(estimates)))
    assert abs(mean - 2.0) <= 3.0 * se


def test_categorical_logit_shift_invariance():
    task = tasks.build_task("source-mixture")
    problem = Problem(
        sim=task.sim,
        model_spec=task.model,
        val_data=tasks.validation_data(task, 32),
        test_data=[],
    )
    rng = np.random.default_rng(6)
    psi = task.psi0().replace(rng.uniform(-1, 1, size=8))
    theta = md.init_model(problem.model_spec, 0)
    latents = sample_latents(psi, problem.sim, 24, rng)
    shifted = psi.replace(psi.raw + 3.7)

    for p in (psi, shifted):
        report = hg.hypergradient(
            "exact_quadratic",
            theta,
            p,
            latents,
            problem.sim,
            problem.model_spec,
            problem.val_data,
        )
        block_sum = float(report.grad_psi.sum())
        scale = max(float(np.abs(report.grad_psi).max()), 1e-12)
        assert abs(block_sum) <= 1e-10 * scale
    # shifting all logits leaves the probabilities, hence the sampled data, unchanged
    assert np.allclose(softmax(psi.raw), softmax(shifted.raw), atol=1e-15)
