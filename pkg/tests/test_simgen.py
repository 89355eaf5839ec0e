import numpy as np
import pytest
import yaml

from simtune import simgen as sg
from simtune.errors import ConfigError


def gaussian_sim(scale_fixed=None):
    scale = ("sigma" if scale_fixed is None else (scale_fixed,))
    return sg.SimulatorSpec(
        latent_blocks=(sg.GaussianBlock(dim=1, mean="mu", scale=scale),),
        renderer="affine_point",
        renderer_constants={"x_scale": 1.0, "y_scale": 0.0},
    )


def categorical_sim(C=4):
    return sg.SimulatorSpec(
        latent_blocks=(
            sg.CategoricalBlock(cardinality=C, logits="logits"),
            sg.GaussianBlock(dim=2, mean=(0.0, 0.0), scale=(1.0, 1.0)),
        ),
        renderer="source_mixture",
        renderer_constants={
            "beta": [1.0],
            "sources": [{"slope": 1.0, "bias": float(j), "noise": 0.1} for j in range(C)],
        },
    )


def test_project_uniform_softmax():
    sim = categorical_sim(4)
    psi = sg.make_params(sim, np.zeros(4))
    probs = sg.project(psi)["logits"]
    assert np.allclose(probs, 0.25, atol=1e-15)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_project_softplus_at_zero():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([0.0, 0.0]))
    assert sg.project(psi)["sigma"][0] == pytest.approx(np.log(2.0), abs=1e-12)


def test_project_saturated_softmax():
    sim = categorical_sim(3)
    psi = sg.make_params(sim, np.array([20.0, 0.0, 0.0]))
    probs = sg.project(psi)["logits"]
    assert probs[0] > 1.0 - 1e-8


def test_scale_floor():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([3.0, -40.0]))
    assert sg.project(psi)["sigma"][0] == sg.SCALE_FLOOR


def test_sample_degenerate_gaussian_concentrates():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([3.0, -40.0]))
    latents = sg.sample_latents(psi, sim, 64, np.random.default_rng(0))
    values = np.array([s.continuous[0] for s in latents])
    assert np.all(np.abs(values - 3.0) < 6 * sg.SCALE_FLOOR)


def test_sample_saturated_categorical_all_first():
    sim = categorical_sim(3)
    psi = sg.make_params(sim, np.array([40.0, 0.0, 0.0]))
    latents = sg.sample_latents(psi, sim, 200, np.random.default_rng(1))
    assert all(s.discrete[0] == 0 for s in latents)


def test_sample_mean_clt_bound():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([0.0, sg.softplus_inv(1.0)]))
    K = 10000
    latents = sg.sample_latents(psi, sim, K, np.random.default_rng(7))
    mean = np.mean([s.continuous[0] for s in latents])
    assert abs(mean) < 4.0 / np.sqrt(K)


def test_render_affine_identity_zero_target():
    sim = gaussian_sim()
    s = sg.LatentSample(np.array([1.7]), ())
    point = sg.render(s, sim)
    assert point.x[0] == 1.7 and point.y[0] == 0.0


def test_render_source_mixture_formula():
    sim = categorical_sim(4)
    s = sg.LatentSample(np.array([2.0, 0.5]), (3,))
    point = sg.render(s, sim)
    # slope * beta.x + bias + noise * z = 1*2 + 3 + 0.1*0.5
    assert point.y[0] == pytest.approx(2.0 + 3.0 + 0.05)
    assert point.x[0] == 2.0


def test_render_deterministic():
    sim = categorical_sim(4)
    s = sg.LatentSample(np.array([0.3, -0.2]), (1,))
    a, b = sg.render(s, sim), sg.render(s, sim)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_score_gaussian_mean_analytic():
    sim = gaussian_sim(scale_fixed=1.0)
    psi = sg.make_params(sim, np.array([0.0]))
    s = sg.LatentSample(np.array([1.0]), ())
    assert sg.log_prob_grad(psi, sim, s)[0] == pytest.approx(1.0, abs=1e-12)


def test_score_categorical_uniform_analytic():
    sim = categorical_sim(4)
    psi = sg.make_params(sim, np.zeros(4))
    s = sg.LatentSample(np.array([0.0, 0.0]), (2,))
    grad = sg.log_prob_grad(psi, sim, s)
    expected = -0.25 * np.ones(4)
    expected[2] += 1.0
    assert np.allclose(grad, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_score_matches_log_prob_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sim = sg.SimulatorSpec(
        latent_blocks=(
            sg.GaussianBlock(dim=2, mean="mu", scale="sigma"),
            sg.CategoricalBlock(cardinality=3, logits="logits"),
        ),
        renderer="affine_point",
        renderer_constants={},
    )
    raw = rng.uniform(-1.0, 1.0, size=7)
    psi = sg.make_params(sim, raw)
    s = sg.sample_latents(psi, sim, 1, rng)[0]
    grad = sg.log_prob_grad(psi, sim, s)
    h = 1e-6
    fd = np.zeros(psi.dim)
    for i in range(psi.dim):
        p = raw.copy()
        p[i] += h
        m = raw.copy()
        m[i] -= h
        fd[i] = (sg.log_prob(psi.replace(p), sim, s) - sg.log_prob(psi.replace(m), sim, s)) / (2 * h)
    floor = 1e-3 * max(np.abs(fd).max(), 1e-12)
    assert np.max(np.abs(grad - fd) / (np.abs(fd) + floor)) < 1e-5


def test_score_categorical_block_sums_to_zero():
    sim = categorical_sim(5)
    rng = np.random.default_rng(3)
    psi = sg.make_params(sim, rng.uniform(-2, 2, size=5))
    latents = sg.sample_latents(psi, sim, 50, rng)
    S = sg.score_matrix(psi, sim, latents)
    assert np.max(np.abs(S[:, :5].sum(axis=1))) < 1e-12


def test_score_zero_mean_property():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([0.5, 0.3]))
    N = 20000
    latents = sg.sample_latents(psi, sim, N, np.random.default_rng(11))
    S = sg.score_matrix(psi, sim, latents)
    assert np.linalg.norm(S.mean(axis=0)) < 5.0 / np.sqrt(N)


def test_ledger_charges_exactly_once():
    sim = gaussian_sim()
    psi = sg.make_params(sim, np.array([0.0, 0.0]))
    ledger = sg.SampleLedger()
    sg.sample_latents(psi, sim, 13, np.random.default_rng(0), ledger)
    sg.sample_latents(psi, sim, 7, np.random.default_rng(1), ledger)
    assert ledger.count == 20
    sg.sample_latents(psi, sim, 5, np.random.default_rng(2))  # no ledger, no charge
    assert ledger.count == 20


def test_common_random_numbers_reuse():
    sim = gaussian_sim()
    noise = sg.draw_base_noise(sim, 16, np.random.default_rng(5))
    a = sg.latents_from_noise(sg.make_params(sim, np.array([0.0, 0.0])), sim, noise)
    b = sg.latents_from_noise(sg.make_params(sim, np.array([1.0, 0.0])), sim, noise)
    diff = np.array([y.continuous[0] - x.continuous[0] for x, y in zip(a, b)])
    assert np.allclose(diff, 1.0, atol=1e-12)  # same noise, shifted mean


def test_simulator_spec_roundtrip():
    sim = categorical_sim(4)
    doc = yaml.safe_load(yaml.safe_dump(sg.sim_to_dict(sim)))
    back = sg.sim_from_dict(doc)
    assert back == sim


def test_simulator_spec_rejects_unknown_keys():
    doc = sg.sim_to_dict(gaussian_sim())
    doc["typo_key"] = 1
    with pytest.raises(ConfigError):
        sg.sim_from_dict(doc)


def test_invalid_psi_rejected():
    sim = gaussian_sim()
    with pytest.raises(ValueError):
        sg.make_params(sim, np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        sg.make_params(sim, np.zeros(5))  # wrong size
