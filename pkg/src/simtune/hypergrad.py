"""Outer gradient of the local validation-objective approximation.

The trained model's one-step-Newton response to a change in the data
distribution turns the bi-level objective into a differentiable surrogate;
its psi-gradient is a score-weighted contraction of per-sample parameter
gradients:

    grad_psi = -(1/K) sum_k  score(s_k) * <g_k, w>

where g_k is the theta-gradient of the loss on the k-th rendered sample and
w depends on the approximation mode:

    exact_quadratic    w = (H + lam I)^-1 g_val      (CG solve)
    approx_quadratic   w = (H + lam I) g_val         (one HVP)
    linear             w = g_val
    no_val             w = 1                         (no validation pull)

H is the Hessian of the mean training loss on the current K-sample dataset
at theta_hat, damped by lam (Levenberg). The sign convention makes
psi <- psi - alpha * grad_psi a descent step on the surrogate. All theta-side
quantities are restricted to the trainable parameter subspace, so frozen
blocks drop out of the contraction exactly as they drop out of training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamVector
from .errors import NumericalFailure
from .model import ModelSpec, make_loss, per_example_loss_jvp, trainable_indices
from .simgen import LatentSample, SimParams, SimulatorSpec, render, score_matrix

MODES = ("exact_quadratic", "approx_quadratic", "linear", "no_val")
NEG_CURV_POLICIES = ("truncate", "raise_damping")


@dataclass(frozen=True)
class CgConfig:
    max_iters: int = 50
    rel_tolerance: float = 1e-6
    negative_curvature_policy: str = "truncate"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0.0 < self.rel_tolerance < 1.0):
            raise ValueError("rel_tolerance must lie in (0, 1)")
        if self.negative_curvature_policy not in NEG_CURV_POLICIES:
            raise ValueError(f"unknown policy {self.negative_curvature_policy!r}")


@dataclass
class CgResult:
    v: np.ndarray
    rel_residual: float
    iters_used: int
    truncated: bool
    lam: float


@dataclass
class NewtonStep:
    delta_theta: np.ndarray
    cg_residual: float
    iters_used: int
    truncated: bool = False


@dataclass
class HypergradReport:
    grad_psi: np.ndarray
    v_psi: np.ndarray  # the contraction vector w (for exact mode, (H+lam I)^-1 g_val)
    g_val: np.ndarray
    per_sample_dot: np.ndarray
    mode: str
    lam: float
    cg_iters: int = 0
    cg_residual: float = 0.0
    cg_truncated: bool = False


class HvpOperator:
    """Symmetric operator v -> (H + lam I) v, matrix-free."""

    def __init__(self, base, dim: int, lam: float = 0.0):
        self._base = base
        self.dim = dim
        self.lam = float(lam)

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        out = self._base(v)
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("hvp")
        if self.lam != 0.0:
            out = out + self.lam * v
        return out

    def with_damping(self, lam: float) -> "HvpOperator":
        return HvpOperator(self._base, self.dim, lam)

    @classmethod
    def from_matrix(cls, A: np.ndarray, lam: float = 0.0) -> "HvpOperator":
        A = np.asarray(A, dtype=np.float64)
        return cls(lambda v: A @ v, A.shape[0], lam)

    @classmethod
    def from_dataset(
        cls,
        theta_hat: ParamVector,
        data,
        spec: ModelSpec,
        lam: float = 0.0,
        restrict_to_trainable: bool = True,
    ) -> "HvpOperator":
        """Hessian of the mean training loss on the given dataset at theta_hat."""
        f = make_loss(data, spec, reduction="mean")
        mask = trainable_indices(spec) if restrict_to_trainable else None
        if mask is None or mask.all():

            def base(v):
                return dc.hvp(f, theta_hat, v).values

            return cls(base, theta_hat.dim, lam)

        idx = np.flatnonzero(mask)

        def base(v):
            full = np.zeros(theta_hat.dim)
            full[idx] = v
            return dc.hvp(f, theta_hat, full).values[idx]

        return cls(base, idx.size, lam)


def cg_solve(op: HvpOperator, g: np.ndarray, cfg: CgConfig | None = None) -> CgResult:
    """Solve (H + lam I) v = g by conjugate gradients.

    Stops at rel_tolerance * ||g||. On negative curvature either returns the
    best iterate with the truncation flag set, or raises the damping tenfold
    and restarts, per the configured policy.
    """
    cfg = cfg or CgConfig()
    g = np.asarray(g, dtype=np.float64)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return CgResult(np.zeros_like(g), 0.0, 0, False, op.lam)

    lam = op.lam
    current = op
    for _ in range(6):  # initial attempt plus up to 5 damping raises
        v, rel, iters, neg = _cg_once(current, g, cfg, gnorm)
        if not neg:
            return CgResult(v, rel, iters, False, current.lam)
        if cfg.negative_curvature_policy == "truncate":
            return CgResult(v, rel, iters, True, current.lam)
        lam = lam * 10.0 if lam > 0.0 else 1e-2
        current = op.with_damping(lam)
    return CgResult(v, rel, iters, True, current.lam)


def _cg_once(op: HvpOperator, g: np.ndarray, cfg: CgConfig, gnorm: float):
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rs = float(r @ r)
    tol = cfg.rel_tolerance * gnorm
    iters = 0
    for _ in range(cfg.max_iters):
        Ap = op.apply(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            return x, float(np.sqrt(rs)) / gnorm, iters, True
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        iters += 1
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol:
            return x, float(np.sqrt(rs_new)) / gnorm, iters, False
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, float(np.sqrt(rs)) / gnorm, iters, False


def val_loss_sum(theta_hat: ParamVector, val_data, spec: ModelSpec) -> float:
    """Summed validation loss (the outer objective's convention)."""
    f = make_loss(val_data, spec, reduction="sum")
    return float(f(dc.Tensor(theta_hat.values, op="theta")).value)


def val_gradient(theta_hat: ParamVector, val_data, spec: ModelSpec) -> np.ndarray:
    """Gradient of the summed validation loss at theta_hat (full layout)."""
    if not val_data:
        raise ValueError("empty validation set")
    f = make_loss(val_data, spec, reduction="sum")
    return dc.gradient(f, theta_hat).values


def per_sample_train_grads(
    theta_hat: ParamVector,
    latents,
    sim: SimulatorSpec,
    spec: ModelSpec,
) -> list[np.ndarray]:
    """One theta-gradient per rendered latent sample (full layout)."""
    if not latents:
        raise ValueError("latents must be non-empty")
    grads = []
    for s in latents:
        point = render(s, sim)
        f = make_loss([point], spec, reduction="mean")
        grads.append(dc.gradient_values(f, theta_hat.values))
    return grads


def contraction_vector(
    mode: str,
    op: HvpOperator | None,
    g_val: np.ndarray,
    cfg: CgConfig | None = None,
) -> tuple[np.ndarray, CgResult | None]:
    """The mode's validation contraction w (see module docstring)."""
    if mode == "exact_quadratic":
        res = cg_solve(op, g_val, cfg)
        return res.v, res
    if mode == "approx_quadratic":
        return op.apply(g_val), None
    if mode == "linear":
        return g_val.copy(), None
    if mode == "no_val":
        return np.ones_like(g_val), None
    raise ValueError(f"unknown mode {mode!r}")


def delta_theta(
    mode: str,
    op: HvpOperator | None,
    g_train: np.ndarray,
    cfg: CgConfig | None = None,
) -> NewtonStep:
    """Model-parameter response for each approximation mode.

    exact_quadratic is the damped Newton step -(H+lam I)^-1 g_train; the
    cheaper modes swap the inverse for a plain HVP, the identity, or the
    constant ones surrogate.
    """
    if mode == "exact_quadratic":
        res = cg_solve(op, g_train, cfg)
        return NewtonStep(-res.v, res.rel_residual, res.iters_used, res.truncated)
    if mode == "approx_quadratic":
        return NewtonStep(-op.apply(g_train), 0.0, 0)
    if mode == "linear":
        return NewtonStep(-np.asarray(g_train, dtype=np.float64).copy(), 0.0, 0)
    if mode == "no_val":
        return NewtonStep(np.ones_like(g_train), 0.0, 0)
    raise ValueError(f"unknown mode {mode!r}")


def hypergradient(
    mode: str,
    theta_hat: ParamVector,
    psi: SimParams,
    latents: list[LatentSample],
    sim: SimulatorSpec,
    spec: ModelSpec,
    val_data,
    cg_cfg: CgConfig | None = None,
    lam: float = 1e-2,
    hvp_op: HvpOperator | None = None,
    train_data=None,
) -> HypergradReport:
    """Assemble the outer gradient w.r.t. raw psi.

    theta_hat is expected to be freshly fine-tuned on the dataset rendered
    from ``latents``. ``train_data`` can pass that dataset in to skip
    re-rendering; ``hvp_op`` overrides the Hessian operator (tests use an
    identity). Update rule: psi <- psi - alpha * grad_psi.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not latents:
        raise ValueError("latents must be non-empty")

    mask = trainable_indices(spec)
    g_val = val_gradient(theta_hat, val_data, spec)[mask]

    if train_data is None:
        train_data = [render(s, sim) for s in latents]
    op = hvp_op
    if op is None and mode in ("exact_quadratic", "approx_quadratic"):
        op = HvpOperator.from_dataset(theta_hat, train_data, spec, lam)

    w, cg = contraction_vector(mode, op, g_val, cg_cfg)

    # <g_k, w> for every sample in one forward-mode pass; frozen coordinates
    # carry zero tangent, which is the trainable-subspace restriction
    w_full = np.zeros(theta_hat.dim)
    w_full[mask] = w
    _, dots = per_example_loss_jvp(train_data, spec, theta_hat.values, w_full)
    S = score_matrix(psi, sim, latents)
    grad_psi = -(S.T @ dots) / len(latents)
    if not np.all(np.isfinite(grad_psi)):
        raise NumericalFailure("hypergradient")

    return HypergradReport(
        grad_psi=grad_psi,
        v_psi=w,
        g_val=g_val,
        per_sample_dot=dots,
        mode=mode,
        lam=(cg.lam if cg is not None else lam),
        cg_iters=(cg.iters_used if cg is not None else 0),
        cg_residual=(cg.rel_residual if cg is not None else 0.0),
        cg_truncated=(cg.truncated if cg is not None else False),
    )
