"""Reverse-mode automatic differentiation over flat parameter vectors.

A small tape engine on float64 numpy arrays. Every operation records two
adjoint rules: a raw one working on plain arrays (used for first-order
gradients) and a taped one that builds new tape nodes, so the gradient
itself stays differentiable. Exact Hessian-vector products run the taped
rule once (gradient graph) and the raw rule once (gradient of the inner
product with a constant vector). The tape is rebuilt on every evaluation
and never cached.

A "scalar function" throughout the package is any callable ``f(theta:
Tensor) -> Tensor`` returning a 0-d tensor; whatever context it needs
(dataset slice, model spec) is captured in its closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure

LayoutEntry = tuple[str, int, tuple[int, ...]]


class Tensor:
    """A node in the computation tape.

    ``vjps`` and ``raw_vjps`` hold one callable per parent, mapping this
    node's adjoint to that parent's adjoint contribution (as a Tensor or a
    plain array respectively).
    """

    __slots__ = ("value", "parents", "op", "vjps", "raw_vjps")

    def __init__(self, value, parents=(), op="input", vjps=(), raw_vjps=(), check=True):
        self.value = np.asarray(value, dtype=np.float64)
        if check and not np.all(np.isfinite(self.value)):
            raise NumericalFailure(op)
        self.parents = parents
        self.op = op
        self.vjps = vjps
        self.raw_vjps = raw_vjps

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"


def constant(x) -> Tensor:
    return Tensor(x, op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# primitive operations


def _unbroadcast_raw(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Taped version: reduce an adjoint to the broadcast operand's shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    t = g
    if extra > 0:
        t = sum_(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = sum_(t, axis=axes, keepdims=True)
    if t.shape != shape:
        t = reshape(t, shape)
    return t


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value + b.value,
        (a, b),
        "add",
        vjps=(lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
        raw_vjps=(lambda g: _unbroadcast_raw(g, sa), lambda g: _unbroadcast_raw(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value - b.value,
        (a, b),
        "sub",
        vjps=(lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(neg(g), sb)),
        raw_vjps=(lambda g: _unbroadcast_raw(g, sa), lambda g: _unbroadcast_raw(-g, sb)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(
        -a.value,
        (a,),
        "neg",
        vjps=(lambda g: neg(g),),
        raw_vjps=(lambda g: -g,),
        check=False,
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        (a, b),
        "mul",
        vjps=(
            lambda g: _unbroadcast(mul(g, b), sa),
            lambda g: _unbroadcast(mul(g, a), sb),
        ),
        raw_vjps=(
            lambda g: _unbroadcast_raw(g * bv, sa),
            lambda g: _unbroadcast_raw(g * av, sb),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    av, bv = a.value, b.value
    return Tensor(
        av / bv,
        (a, b),
        "div",
        vjps=(
            lambda g: _unbroadcast(div(g, b), sa),
            lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), sb),
        ),
        raw_vjps=(
            lambda g: _unbroadcast_raw(g / bv, sa),
            lambda g: _unbroadcast_raw(-g * av / (bv * bv), sb),
        ),
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (no tape node for the constant)."""
    a = _as_tensor(a)
    c = float(c)
    return Tensor(
        a.value * c,
        (a,),
        "scale",
        vjps=(lambda g: scale(g, c),),
        raw_vjps=(lambda g: g * c,),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    av, bv = a.value, b.value
    return Tensor(
        av @ bv,
        (a, b),
        "matmul",
        vjps=(lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
        raw_vjps=(lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(
        a.value.T,
        (a,),
        "transpose",
        vjps=(lambda g: transpose(g),),
        raw_vjps=(lambda g: g.T,),
        check=False,
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return Tensor(
        a.value.reshape(shape),
        (a,),
        "reshape",
        vjps=(lambda g: reshape(g, old),),
        raw_vjps=(lambda g: g.reshape(old),),
        check=False,
    )


def broadcast(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    shape = tuple(shape)
    return Tensor(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        "broadcast",
        vjps=(lambda g: _unbroadcast(g, old),),
        raw_vjps=(lambda g: _unbroadcast_raw(g, old),),
        check=False,
    )


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    ndim = a.value.ndim
    src_shape = a.shape
    val = a.value.sum(axis=axis, keepdims=keepdims)

    if keepdims or axis is None:
        kd_shape = val.shape if keepdims else (1,) * ndim
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % ndim for ax in axes)
        kd_shape = tuple(1 if i in axes else n for i, n in enumerate(src_shape))

    def vjp(g):
        t = g if g.shape == kd_shape else reshape(g, kd_shape)
        return broadcast(t, src_shape)

    def raw_vjp(g):
        return np.broadcast_to(g.reshape(kd_shape), src_shape)

    return Tensor(val, (a,), "sum", vjps=(vjp,), raw_vjps=(raw_vjp,))


def narrow(a, start: int, length: int) -> Tensor:
    """Contiguous slice of a 1-d tensor."""
    a = _as_tensor(a)
    if a.value.ndim != 1:
        raise ValueError("narrow expects a 1-d tensor")
    total = a.value.size

    def raw_vjp(g):
        out = np.zeros(total)
        out[start : start + length] = g
        return out

    return Tensor(
        a.value[start : start + length],
        (a,),
        "narrow",
        vjps=(lambda g: embed(g, start, total),),
        raw_vjps=(raw_vjp,),
        check=False,
    )


def embed(a, start: int, total: int) -> Tensor:
    """Place a 1-d tensor into a zero vector of size ``total`` at ``start``."""
    a = _as_tensor(a)
    length = a.value.size
    out = np.zeros(total)
    out[start : start + length] = a.value
    return Tensor(
        out,
        (a,),
        "embed",
        vjps=(lambda g: narrow(g, start, length),),
        raw_vjps=(lambda g: g[start : start + length],),
        check=False,
    )


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    out = Tensor(y, (a,), "tanh", check=False)
    out.vjps = (lambda g: mul(g, sub(1.0, mul(out, out))),)
    out.raw_vjps = (lambda g: g * (1.0 - y * y),)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.value > 0).astype(np.float64)
    return Tensor(
        a.value * mask,
        (a,),
        "relu",
        vjps=(lambda g: mul(g, constant(mask)),),
        raw_vjps=(lambda g: g * mask,),
        check=False,
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.value)
    out = Tensor(y, (a,), "exp")
    out.vjps = (lambda g: mul(g, out),)
    out.raw_vjps = (lambda g: g * y,)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return Tensor(
        np.log(av),
        (a,),
        "log",
        vjps=(lambda g: div(g, a),),
        raw_vjps=(lambda g: g / av,),
    )


def logsumexp(a, axis: int) -> Tensor:
    """Row-stable log-sum-exp; the max shift is treated as a constant."""
    a = _as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    s = sum_(exp(sub(a, constant(m))), axis=axis)
    return add(log(s), constant(np.squeeze(m, axis=axis)))


# ---------------------------------------------------------------------------
# reverse sweep


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers


def backward(out: Tensor, wrt: Tensor, create_graph: bool = False):
    """Adjoint of a scalar ``out`` with respect to ``wrt``.

    With ``create_graph`` the sweep builds tape nodes and returns a Tensor
    that can be differentiated again; otherwise it runs on plain arrays and
    returns an ndarray.
    """
    if out.value.ndim != 0:
        raise ValueError("backward expects a scalar output")
    order = _toposort(out)

    # Only sweep through nodes that actually depend on wrt; everything else
    # (data constants, detached shifts) contributes nothing.
    depends: set[int] = {id(wrt)}
    for node in order:
        if any(id(p) in depends for p in node.parents):
            depends.add(id(node))
    if id(out) not in depends:
        zero = np.zeros(wrt.shape)
        return constant(zero) if create_graph else zero

    if create_graph:
        adjoints: dict[int, Tensor] = {id(out): constant(np.array(1.0))}
    else:
        adjoints = {id(out): np.array(1.0)}

    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None or id(node) not in depends:
            continue
        if id(node) == id(wrt):
            adjoints[id(node)] = g  # keep the target's accumulated adjoint
            continue
        rules = node.vjps if create_graph else node.raw_vjps
        for parent, vjp in zip(node.parents, rules):
            if id(parent) not in depends:
                continue
            contrib = vjp(g)
            prev = adjoints.get(id(parent))
            if prev is None:
                adjoints[id(parent)] = contrib
            else:
                adjoints[id(parent)] = add(prev, contrib) if create_graph else prev + contrib
    result = adjoints.get(id(wrt))
    if result is None:
        zero = np.zeros(wrt.shape)
        return constant(zero) if create_graph else zero
    return result


# ---------------------------------------------------------------------------
# flat parameter vectors and the public API


def _check_layout(layout, n: int) -> None:
    entries = sorted(layout, key=lambda e: e[1])
    cursor = 0
    for name, offset, shape in entries:
        if offset != cursor:
            raise ValueError(f"layout block '{name}' breaks contiguity at offset {offset}")
        cursor += int(np.prod(shape, dtype=int)) if shape else 1
    if cursor != n:
        raise ValueError(f"layout covers {cursor} entries, vector has {n}")


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector with a named block layout."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 1:
            raise ValueError("parameter vector must be 1-d")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector must be finite")
        _check_layout(self.layout, v.size)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def dim(self) -> int:
        return self.values.size

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def block(self, name: str) -> np.ndarray:
        for bname, offset, shape in self.layout:
            if bname == name:
                size = int(np.prod(shape, dtype=int)) if shape else 1
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)


def gradient(f, theta: ParamVector) -> ParamVector:
    """Exact reverse-mode gradient of a scalar function at ``theta``."""
    t = Tensor(theta.values, op="theta")
    g = backward(f(t), t)
    return theta.replace(g.copy())


def gradient_values(f, values: np.ndarray) -> np.ndarray:
    """Gradient on a bare array; hot path for per-sample loops."""
    t = Tensor(values, op="theta")
    return backward(f(t), t).copy()


def value_and_gradient(f, theta: ParamVector) -> tuple[float, ParamVector]:
    t = Tensor(theta.values, op="theta")
    loss = f(t)
    g = backward(loss, t)
    return float(loss.value), theta.replace(g.copy())


def hvp(f, theta: ParamVector, v) -> ParamVector:
    """Exact Hessian-vector product H(theta)·v via double backward.

    Differentiates the inner product <grad f, v> with v held constant; the
    first sweep is taped, the second is raw.
    """
    vec = v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)
    if vec.shape != theta.values.shape:
        raise ValueError("hvp vector dimension mismatch")
    t = Tensor(theta.values, op="theta")
    g = backward(f(t), t, create_graph=True)
    inner = sum_(mul(g, constant(vec)))
    h = backward(inner, t)
    return theta.replace(h.copy())
