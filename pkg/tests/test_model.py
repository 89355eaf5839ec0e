import numpy as np
import pytest

from simtune import model as md
from simtune.diffcore import ParamVector
from simtune.errors import TrainingDiverged
from simtune.simgen import DataPoint

CONSTANT_SPEC = md.ModelSpec(layer_sizes=(1, 1), trainable_mask=(False, True))


def constant_theta(b, w=0.0):
    return ParamVector(np.array([w, b]), md.layout(CONSTANT_SPEC))


def test_init_deterministic():
    spec = md.ModelSpec(layer_sizes=(1, 1))
    a = md.init_model(spec, 0)
    b = md.init_model(spec, 0)
    assert np.array_equal(a.values, b.values)


def test_param_count():
    assert md.param_count(md.ModelSpec(layer_sizes=(2, 3, 1))) == 2 * 3 + 3 + 3 * 1 + 1


def test_init_seeds_differ():
    spec = md.ModelSpec(layer_sizes=(2, 3, 1))
    assert not np.array_equal(md.init_model(spec, 0).values, md.init_model(spec, 1).values)


def test_spec_validation():
    with pytest.raises(ValueError):
        md.ModelSpec(layer_sizes=(3,))
    with pytest.raises(ValueError):
        md.ModelSpec(layer_sizes=(2, 1), activation="sigmoid")
    with pytest.raises(ValueError):
        md.ModelSpec(layer_sizes=(2, 1), trainable_mask=(False, False))
    with pytest.raises(ValueError):
        md.ModelSpec(layer_sizes=(2, 1), trainable_mask=(True,))


def test_dataset_loss_perfect_fit_is_zero():
    theta = constant_theta(3.0)
    data = [DataPoint(np.zeros(1), np.array([3.0]))]
    assert md.dataset_loss(theta, data, CONSTANT_SPEC) == 0.0


def test_dataset_loss_single_point_mse():
    theta = constant_theta(2.5)
    data = [DataPoint(np.zeros(1), np.array([1.0]))]
    assert md.dataset_loss(theta, data, CONSTANT_SPEC) == pytest.approx((2.5 - 1.0) ** 2)


def test_cross_entropy_uniform_logits():
    spec = md.ModelSpec(layer_sizes=(2, 5), loss_kind="cross_entropy")
    theta = md.init_model(spec, 0).replace(np.zeros(md.param_count(spec)))
    data = [DataPoint(np.zeros(2), 3)]
    assert md.dataset_loss(theta, data, spec) == pytest.approx(np.log(5.0))


def test_dataset_loss_empty_raises():
    with pytest.raises(ValueError):
        md.dataset_loss(constant_theta(0.0), [], CONSTANT_SPEC)


def test_fine_tune_one_exact_newton_like_step():
    # l(b) = (b - 5)^2 has curvature 2, so sgd with lr = 1/2 solves it in one step
    cfg = md.TrainConfig(epochs=1, batch_size=1, lr=0.5, seed=0)
    data = [DataPoint(np.zeros(1), np.array([5.0]))]
    out = md.fine_tune(constant_theta(0.0), data, cfg, CONSTANT_SPEC)
    assert out.values[1] == pytest.approx(5.0, abs=1e-12)


def test_fine_tune_keeps_frozen_blocks_bit_identical():
    spec = md.ModelSpec(layer_sizes=(2, 3, 1), trainable_mask=(False, True, True, True))
    theta = md.init_model(spec, 4)
    rng = np.random.default_rng(0)
    data = [DataPoint(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(8)]
    out = md.fine_tune(theta, data, md.TrainConfig(epochs=5, batch_size=4, lr=0.05, seed=1), spec)
    frozen = md.layout(spec)[0]
    size = int(np.prod(frozen[2]))
    assert np.array_equal(out.values[:size], theta.values[:size])
    assert not np.array_equal(out.values, theta.values)


def test_linear_regression_reaches_least_squares_fit():
    # noiseless targets: the closed-form optimum has zero loss
    spec = md.ModelSpec(layer_sizes=(2, 1))
    rng = np.random.default_rng(3)
    X = rng.standard_normal((16, 2))
    w_true = np.array([1.5, -0.5])
    y = X @ w_true + 0.25
    lstsq_resid = np.linalg.lstsq(np.hstack([X, np.ones((16, 1))]), y, rcond=None)[1]
    assert lstsq_resid.size == 0 or lstsq_resid[0] < 1e-20
    data = [DataPoint(X[i], np.array([y[i]])) for i in range(16)]
    theta = md.init_model(spec, 0)
    out = md.fine_tune(theta, data, md.TrainConfig(epochs=200, batch_size=16, lr=0.2, seed=0), spec)
    assert md.dataset_loss(out, data, spec) < 1e-6


def test_dataset_loss_permutation_invariant():
    spec = md.ModelSpec(layer_sizes=(2, 4, 1))
    rng = np.random.default_rng(9)
    data = [DataPoint(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(10)]
    theta = md.init_model(spec, 1)
    a = md.dataset_loss(theta, data, spec)
    b = md.dataset_loss(theta, list(reversed(data)), spec)
    assert a == pytest.approx(b, rel=1e-12)


def test_fine_tune_full_batch_deterministic():
    spec = md.ModelSpec(layer_sizes=(2, 3, 1))
    rng = np.random.default_rng(11)
    data = [DataPoint(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(6)]
    theta = md.init_model(spec, 2)
    cfg = md.TrainConfig(epochs=10, batch_size=6, lr=0.05, seed=7)
    a = md.fine_tune(theta, data, cfg, spec)
    b = md.fine_tune(theta, data, cfg, spec)
    assert np.array_equal(a.values, b.values)


def test_loss_non_increasing_at_small_step():
    spec = md.ModelSpec(layer_sizes=(2, 4, 1))
    rng = np.random.default_rng(13)
    data = [DataPoint(rng.standard_normal(2), rng.standard_normal(1)) for _ in range(12)]
    theta = md.init_model(spec, 3)
    before = md.dataset_loss(theta, data, spec)
    out = md.fine_tune(theta, data, md.TrainConfig(epochs=1, batch_size=12, lr=1e-3, seed=0), spec)
    assert md.dataset_loss(out, data, spec) <= before


def test_divergence_raises_with_epoch_index():
    data = [DataPoint(np.zeros(1), np.array([5.0]))]
    cfg = md.TrainConfig(epochs=50, batch_size=1, lr=50.0, seed=0)
    with pytest.raises(TrainingDiverged) as exc:
        md.fine_tune(constant_theta(0.0), data, cfg, CONSTANT_SPEC)
    assert exc.value.epoch >= 0


def test_adam_optimizer_trains():
    spec = md.ModelSpec(layer_sizes=(1, 1))
    rng = np.random.default_rng(17)
    data = [DataPoint(np.array([x]), np.array([2.0 * x + 1.0])) for x in rng.standard_normal(12)]
    theta = md.init_model(spec, 1)
    cfg = md.TrainConfig(epochs=300, batch_size=12, optimizer="adam", lr=0.05, seed=0)
    out = md.fine_tune(theta, data, cfg, spec)
    assert md.dataset_loss(out, data, spec) < 1e-4


def test_batch_size_clipped_to_dataset():
    data = [DataPoint(np.zeros(1), np.array([1.0]))]
    cfg = md.TrainConfig(epochs=1, batch_size=999, lr=0.1, seed=0)
    out = md.fine_tune(constant_theta(0.0), data, cfg, CONSTANT_SPEC)
    assert out.values[1] != 0.0
