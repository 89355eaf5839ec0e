import numpy as np
import pytest

from simtune import diffcore as dc
from simtune import model as md
from simtune.errors import NumericalFailure
from simtune.simgen import DataPoint

LAYOUT_2 = (("w0", 0, (1, 1)), ("b0", 1, (1,)))


def half_sq_norm(t):
    return dc.scale(dc.sum_(dc.mul(t, t)), 0.5)


def random_mlp_case(seed, loss_kind="mse", activation="tanh"):
    rng = np.random.default_rng(seed)
    spec = md.ModelSpec(layer_sizes=(2, 5, 2), activation=activation, loss_kind=loss_kind)
    if loss_kind == "mse":
        data = [DataPoint(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(8)]
    else:
        data = [DataPoint(rng.standard_normal(2), int(rng.integers(2))) for _ in range(8)]
    theta = md.init_model(spec, seed)
    return md.make_loss(data, spec), theta


def fd_gradient(f, theta, h):
    out = np.zeros(theta.dim)
    for i in range(theta.dim):
        p = theta.values.copy()
        p[i] += h
        m = theta.values.copy()
        m[i] -= h
        out[i] = (float(f(dc.Tensor(p)).value) - float(f(dc.Tensor(m)).value)) / (2 * h)
    return out


def rel_err(a, b):
    floor = 1e-3 * max(float(np.abs(b).max()), 1e-12)
    return float(np.max(np.abs(a - b) / (np.abs(b) + floor)))


def test_gradient_of_quadratic_is_identity():
    theta = dc.ParamVector(np.array([3.0, -4.0]), LAYOUT_2)
    g = dc.gradient(half_sq_norm, theta)
    assert np.array_equal(g.values, np.array([3.0, -4.0]))


def test_gradient_of_constant_is_zero():
    theta = dc.ParamVector(np.array([3.0, -4.0]), LAYOUT_2)
    g = dc.gradient(lambda t: dc.constant(np.array(7.0)), theta)
    assert np.array_equal(g.values, np.zeros(2))


def test_mlp_gradient_matches_central_differences():
    f, theta = random_mlp_case(0)
    g = dc.gradient(f, theta).values
    g_fd = fd_gradient(f, theta, h=1e-5)
    assert rel_err(g, g_fd) < 1e-5


def test_hvp_diagonal_quadratic():
    A = np.array([2.0, 4.0])
    f = lambda t: dc.scale(dc.sum_(dc.mul(dc.constant(A), dc.mul(t, t))), 0.5)
    theta = dc.ParamVector(np.array([1.0, 1.0]), LAYOUT_2)
    hv = dc.hvp(f, theta, np.array([1.0, 1.0]))
    assert np.allclose(hv.values, [2.0, 4.0], atol=1e-14)


def test_hvp_zero_vector_gives_zero():
    f, theta = random_mlp_case(1)
    hv = dc.hvp(f, theta, np.zeros(theta.dim))
    assert np.array_equal(hv.values, np.zeros(theta.dim))


def test_hvp_matches_finite_differences_of_gradients():
    f, theta = random_mlp_case(2)
    rng = np.random.default_rng(3)
    v = rng.standard_normal(theta.dim)
    h = 1e-4
    hv = dc.hvp(f, theta, v).values
    gp = dc.gradient(f, theta.replace(theta.values + h * v)).values
    gm = dc.gradient(f, theta.replace(theta.values - h * v)).values
    assert rel_err(hv, (gp - gm) / (2 * h)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("loss_kind", ["mse", "cross_entropy"])
def test_gradient_fd_property(seed, loss_kind):
    f, theta = random_mlp_case(seed + 10, loss_kind=loss_kind)
    g = dc.gradient(f, theta).values
    assert rel_err(g, fd_gradient(f, theta, 1e-5)) < 1e-5


def test_hessian_symmetry_through_hvp():
    f, theta = random_mlp_case(4)
    rng = np.random.default_rng(5)
    u = rng.standard_normal(theta.dim)
    v = rng.standard_normal(theta.dim)
    Hu = dc.hvp(f, theta, u).values
    Hv = dc.hvp(f, theta, v).values
    lhs, rhs = float(u @ Hv), float(v @ Hu)
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs), 1e-12)


def test_hvp_linearity():
    f, theta = random_mlp_case(6)
    rng = np.random.default_rng(7)
    u = rng.standard_normal(theta.dim)
    v = rng.standard_normal(theta.dim)
    a, b = 0.7, -1.3
    combo = dc.hvp(f, theta, a * u + b * v).values
    parts = a * dc.hvp(f, theta, u).values + b * dc.hvp(f, theta, v).values
    scale = max(float(np.abs(parts).max()), 1e-12)
    assert np.max(np.abs(combo - parts)) <= 1e-10 * scale


def test_gradient_deterministic_bit_identical():
    f, theta = random_mlp_case(8)
    g1 = dc.gradient(f, theta).values
    g2 = dc.gradient(f, theta).values
    assert np.array_equal(g1, g2)


def test_nonfinite_intermediate_names_the_operation():
    theta = dc.ParamVector(np.array([-1.0, 1.0]), LAYOUT_2)
    with pytest.raises(NumericalFailure) as exc:
        dc.gradient(lambda t: dc.sum_(dc.log(t)), theta)
    assert exc.value.op_name == "log"


def test_param_vector_rejects_bad_layouts():
    with pytest.raises(ValueError):
        dc.ParamVector(np.zeros(3), (("a", 0, (2,)), ("b", 1, (2,))))  # overlap
    with pytest.raises(ValueError):
        dc.ParamVector(np.zeros(3), (("a", 0, (2,)),))  # not covering
    with pytest.raises(ValueError):
        dc.ParamVector(np.array([np.inf, 0.0]), (("a", 0, (2,)),))


def test_param_vector_block_access():
    pv = dc.ParamVector(np.arange(3.0), (("w0", 0, (1, 2)), ("b0", 2, (1,))))
    assert pv.block("w0").shape == (1, 2)
    assert pv.block("b0")[0] == 2.0
    with pytest.raises(KeyError):
        pv.block("nope")
