"""Small dense task networks, standard losses, and the inner-loop trainer.

Parameters live in a single flat vector laid out as (w0, b0, w1, b1, ...).
The trainable mask is per block, which is how frozen layers are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamVector, Tensor
from .errors import TrainingDiverged

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("mse", "cross_entropy")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    loss_kind: str = "mse"
    trainable_mask: tuple[bool, ...] | None = None  # per block (w0, b0, w1, b1, ...)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer_sizes must list >= 2 positive sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.trainable_mask is not None:
            mask = tuple(bool(b) for b in self.trainable_mask)
            if len(mask) != 2 * (len(self.layer_sizes) - 1):
                raise ValueError("trainable_mask must have one entry per weight/bias block")
            if not any(mask):
                raise ValueError("at least one block must be trainable")
            object.__setattr__(self, "trainable_mask", mask)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def layout(spec: ModelSpec) -> tuple[dc.LayoutEntry, ...]:
    entries = []
    offset = 0
    for i in range(spec.n_layers):
        nin, nout = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        entries.append((f"w{i}", offset, (nin, nout)))
        offset += nin * nout
        entries.append((f"b{i}", offset, (nout,)))
        offset += nout
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    return sum(
        spec.layer_sizes[i] * spec.layer_sizes[i + 1] + spec.layer_sizes[i + 1]
        for i in range(spec.n_layers)
    )


def trainable_indices(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over the flat parameter vector."""
    mask = np.ones(param_count(spec), dtype=bool)
    if spec.trainable_mask is None:
        return mask
    for flag, (_, offset, shape) in zip(spec.trainable_mask, layout(spec)):
        size = int(np.prod(shape, dtype=int))
        mask[offset : offset + size] = flag
    return mask


def init_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Scaled uniform fan-in init for weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    values = np.zeros(param_count(spec))
    for name, offset, shape in layout(spec):
        if name.startswith("w"):
            nin = shape[0]
            bound = 1.0 / np.sqrt(nin)
            size = int(np.prod(shape, dtype=int))
            values[offset : offset + size] = rng.uniform(-bound, bound, size=size)
    return ParamVector(values, layout(spec))


def _stack(data, spec: ModelSpec):
    X = np.stack([np.atleast_1d(np.asarray(p.x, dtype=np.float64)) for p in data])
    if spec.loss_kind == "mse":
        Y = np.stack([np.atleast_1d(np.asarray(p.y, dtype=np.float64)) for p in data])
    else:
        Y = np.array([int(p.y) for p in data], dtype=int)
    return X, Y


def forward(theta: Tensor, X: np.ndarray, spec: ModelSpec) -> Tensor:
    """Batched network output, shape (B, layer_sizes[-1])."""
    h = dc.constant(X)
    act = dc.tanh if spec.activation == "tanh" else dc.relu
    for name, offset, shape in layout(spec):
        size = int(np.prod(shape, dtype=int))
        block = dc.narrow(theta, offset, size)
        if name.startswith("w"):
            W = dc.reshape(block, shape)
            h = dc.matmul(h, W)
        else:
            h = dc.add(h, block)
            if name != f"b{spec.n_layers - 1}":
                h = act(h)
    return h


def make_loss(data, spec: ModelSpec, reduction: str = "mean"):
    """Build a scalar loss function over a fixed dataset slice.

    Per-example losses: mse sums squared errors over output dimensions;
    cross_entropy is logsumexp(logits) - logit[target].
    """
    if not data:
        raise ValueError("empty dataset")
    X, Y = _stack(data, spec)
    n = len(data)

    if spec.loss_kind == "mse":

        def f(theta: Tensor) -> Tensor:
            pred = forward(theta, X, spec)
            diff = dc.sub(pred, dc.constant(Y))
            per = dc.sum_(dc.mul(diff, diff), axis=1)
            total = dc.sum_(per)
            return dc.scale(total, 1.0 / n) if reduction == "mean" else total

    else:
        onehot = np.zeros((n, spec.layer_sizes[-1]))
        onehot[np.arange(n), Y] = 1.0

        def f(theta: Tensor) -> Tensor:
            logits = forward(theta, X, spec)
            lse = dc.logsumexp(logits, axis=1)
            picked = dc.sum_(dc.mul(logits, dc.constant(onehot)), axis=1)
            total = dc.sum_(dc.sub(lse, picked))
            return dc.scale(total, 1.0 / n) if reduction == "mean" else total

    return f


def dataset_loss(theta: ParamVector, data, spec: ModelSpec) -> float:
    """Mean of per-example losses over a non-empty dataset."""
    f = make_loss(data, spec, reduction="mean")
    return float(f(Tensor(theta.values, op="theta")).value)


def per_example_loss_jvp(data, spec: ModelSpec, theta_values: np.ndarray, w: np.ndarray):
    """Per-example losses and their exact directional derivatives along w.

    Forward-mode twin of the batched loss: one pass gives <grad l_k, w> for
    every example, which is what the score-weighted contraction needs.
    Returns (losses, dots), each of shape (B,).
    """
    if not data:
        raise ValueError("empty dataset")
    X, Y = _stack(data, spec)
    h = X
    ht = np.zeros_like(X)
    act = spec.activation
    last_bias = f"b{spec.n_layers - 1}"
    for name, offset, shape in layout(spec):
        size = int(np.prod(shape, dtype=int))
        block = theta_values[offset : offset + size]
        block_t = w[offset : offset + size]
        if name.startswith("w"):
            W = block.reshape(shape)
            Wt = block_t.reshape(shape)
            h, ht = h @ W, ht @ W + h @ Wt
        else:
            h = h + block
            ht = ht + block_t
            if name != last_bias:
                if act == "tanh":
                    h = np.tanh(h)
                    ht = ht * (1.0 - h * h)
                else:
                    mask = (h > 0).astype(np.float64)
                    h = h * mask
                    ht = ht * mask
    if spec.loss_kind == "mse":
        diff = h - Y
        losses = np.sum(diff * diff, axis=1)
        dots = np.sum(2.0 * diff * ht, axis=1)
    else:
        m = h.max(axis=1, keepdims=True)
        p = np.exp(h - m)
        p /= p.sum(axis=1, keepdims=True)
        idx = np.arange(len(data))
        losses = np.log(np.exp(h - m).sum(axis=1)) + m[:, 0] - h[idx, Y]
        dots = np.sum(p * ht, axis=1) - ht[idx, Y]
    return losses, dots


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    optimizer: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def fine_tune(theta: ParamVector, data, cfg: TrainConfig, spec: ModelSpec) -> ParamVector:
    """Train for cfg.epochs on the given dataset, warm-starting from theta.

    Frozen blocks are left bit-identical. Raises TrainingDiverged when the
    full-dataset loss exceeds 1e6x its initial value or turns non-finite.
    """
    if not data:
        raise ValueError("empty dataset")
    mask = trainable_indices(spec)
    values = theta.values.copy()
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(data))
    initial = dataset_loss(theta, data, spec)
    guard = 1e6 * max(initial, 1e-8)

    velocity = np.zeros_like(values)
    m = np.zeros_like(values)
    v = np.zeros_like(values)
    step_count = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        for start in range(0, len(data), batch):
            idx = perm[start : start + batch]
            f = make_loss([data[i] for i in idx], spec, reduction="mean")
            _, grad = dc.value_and_gradient(f, ParamVector(values, theta.layout))
            g = np.where(mask, grad.values, 0.0)
            if cfg.optimizer == "sgd":
                if cfg.momentum > 0.0:
                    velocity = cfg.momentum * velocity + g
                    values = values - cfg.lr * velocity
                else:
                    values = values - cfg.lr * g
            else:
                step_count += 1
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
                mhat = m / (1.0 - cfg.beta1**step_count)
                vhat = v / (1.0 - cfg.beta2**step_count)
                values = values - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged(epoch)
        epoch_loss = dataset_loss(ParamVector(values, theta.layout), data, spec)
        if not np.isfinite(epoch_loss) or epoch_loss > guard:
            raise TrainingDiverged(epoch)

    return theta.replace(values)
