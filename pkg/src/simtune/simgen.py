"""Stochastic simulators: parametric latent distributions, deterministic
renderers, and the score-function machinery.

A simulator is split into a latent draw s ~ q_psi(s) and a deterministic
renderer zeta = r(s); the induced pushforward over rendered data is never
evaluated directly, everything happens in latent space. Latent blocks may be
bound to a psi block (learnable) or carry fixed constants, so a task can
learn e.g. only a categorical mixture while keeping its noise model fixed.

psi lives in an unconstrained raw space: means pass through unchanged,
scales through a softplus with a floor, categorical logits through a stable
softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCALE_FLOOR = 1e-4

PSI_KINDS = ("gaussian_mean", "gaussian_log_scale", "categorical_logits")


@dataclass(frozen=True)
class GaussianBlock:
    """Diagonal Gaussian latent block; mean/scale are a psi block name or fixed values."""

    dim: int
    mean: str | tuple[float, ...]
    scale: str | tuple[float, ...]

    def __post_init__(self):
        for fname in ("mean", "scale"):
            v = getattr(self, fname)
            if not isinstance(v, str):
                v = tuple(float(x) for x in v)
                if len(v) != self.dim:
                    raise ValueError(f"fixed {fname} must have {self.dim} entries")
                object.__setattr__(self, fname, v)


@dataclass(frozen=True)
class CategoricalBlock:
    cardinality: int
    logits: str | tuple[float, ...]

    def __post_init__(self):
        if not isinstance(self.logits, str):
            v = tuple(float(x) for x in self.logits)
            if len(v) != self.cardinality:
                raise ValueError("fixed logits must match cardinality")
            object.__setattr__(self, "logits", v)


@dataclass(frozen=True)
class SimulatorSpec:
    latent_blocks: tuple
    renderer: str
    renderer_constants: dict = field(default_factory=dict)
    hidden_psi_star: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "latent_blocks", tuple(self.latent_blocks))
        if self.renderer not in RENDERERS:
            raise ValueError(f"unknown renderer {self.renderer!r}")
        if self.hidden_psi_star is not None:
            object.__setattr__(
                self, "hidden_psi_star", tuple(float(x) for x in self.hidden_psi_star)
            )


@dataclass(frozen=True)
class PsiBlock:
    name: str
    kind: str  # one of PSI_KINDS
    offset: int
    size: int


@dataclass(frozen=True)
class SimParams:
    """Unconstrained simulator parameter vector with its block structure."""

    raw: np.ndarray
    blocks: tuple[PsiBlock, ...]

    def __post_init__(self):
        raw = np.ascontiguousarray(np.asarray(self.raw, dtype=np.float64))
        if raw.ndim != 1:
            raise ValueError("raw psi must be 1-d")
        if not np.all(np.isfinite(raw)):
            raise ValueError("raw psi must be finite")
        cursor = 0
        for b in self.blocks:
            if b.kind not in PSI_KINDS:
                raise ValueError(f"unknown psi block kind {b.kind!r}")
            if b.offset != cursor:
                raise ValueError("psi blocks must be contiguous")
            cursor += b.size
        if cursor != raw.size:
            raise ValueError("psi blocks must cover the raw vector")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def dim(self) -> int:
        return self.raw.size

    def replace(self, raw: np.ndarray) -> "SimParams":
        return SimParams(raw, self.blocks)

    def block_slice(self, name: str) -> slice:
        for b in self.blocks:
            if b.name == name:
                return slice(b.offset, b.offset + b.size)
        raise KeyError(name)


@dataclass(frozen=True)
class LatentSample:
    """One draw s ~ q_psi: continuous dims concatenated in block order plus
    one category index per categorical block."""

    continuous: np.ndarray
    discrete: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "continuous", np.asarray(self.continuous, dtype=np.float64)
        )
        object.__setattr__(self, "discrete", tuple(int(j) for j in self.discrete))


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    y: np.ndarray | int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        if not isinstance(self.y, (int, np.integer)):
            object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))


class SampleLedger:
    """Audited count of simulator-generated training examples."""

    def __init__(self):
        self.count = 0

    def charge(self, k: int) -> None:
        self.count += int(k)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1+e^x); y must exceed the floor region
    return np.log(np.expm1(y))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    p = np.exp(z)
    p /= p.sum()
    return p


def psi_layout(sim: SimulatorSpec) -> tuple[PsiBlock, ...]:
    """Psi blocks implied by the simulator's learnable latent fields, in order."""
    blocks: list[PsiBlock] = []
    offset = 0
    seen: set[str] = set()

    def push(name: str, kind: str, size: int):
        nonlocal offset
        if name in seen:
            raise ValueError(f"psi block name {name!r} bound twice")
        seen.add(name)
        blocks.append(PsiBlock(name, kind, offset, size))
        offset += size

    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            if isinstance(lb.mean, str):
                push(lb.mean, "gaussian_mean", lb.dim)
            if isinstance(lb.scale, str):
                push(lb.scale, "gaussian_log_scale", lb.dim)
        elif isinstance(lb, CategoricalBlock):
            if isinstance(lb.logits, str):
                push(lb.logits, "categorical_logits", lb.cardinality)
        else:
            raise TypeError(f"unknown latent block {type(lb)!r}")
    return tuple(blocks)


def make_params(sim: SimulatorSpec, raw) -> SimParams:
    return SimParams(np.asarray(raw, dtype=np.float64), psi_layout(sim))


def project(psi: SimParams) -> dict[str, np.ndarray]:
    """Constrained view of psi: means as-is, scales = softplus (floored),
    categorical probabilities = stable softmax."""
    out: dict[str, np.ndarray] = {}
    for b in psi.blocks:
        raw = psi.raw[b.offset : b.offset + b.size]
        if b.kind == "gaussian_mean":
            out[b.name] = raw.copy()
        elif b.kind == "gaussian_log_scale":
            out[b.name] = np.maximum(softplus(raw), SCALE_FLOOR)
        else:
            out[b.name] = softmax(raw)
    return out


def _resolve_gaussian(lb: GaussianBlock, projected: dict[str, np.ndarray]):
    mean = projected[lb.mean] if isinstance(lb.mean, str) else np.asarray(lb.mean)
    scale = projected[lb.scale] if isinstance(lb.scale, str) else np.asarray(lb.scale)
    return mean, scale


def _resolve_probs(lb: CategoricalBlock, projected: dict[str, np.ndarray]):
    if isinstance(lb.logits, str):
        return projected[lb.logits]
    return softmax(np.asarray(lb.logits))


@dataclass
class BaseNoise:
    """Reusable standard noise: z ~ N(0,1) per Gaussian block, u ~ U(0,1)
    per categorical block. Feeding the same noise to nearby psi values gives
    common-random-number evaluations."""

    normals: tuple[np.ndarray, ...]
    uniforms: tuple[np.ndarray, ...]
    size: int


def draw_base_noise(sim: SimulatorSpec, K: int, rng: np.random.Generator) -> BaseNoise:
    normals = []
    uniforms = []
    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            normals.append(rng.standard_normal((K, lb.dim)))
        else:
            uniforms.append(rng.uniform(size=K))
    return BaseNoise(tuple(normals), tuple(uniforms), K)


def latents_from_noise(psi: SimParams, sim: SimulatorSpec, noise: BaseNoise) -> list[LatentSample]:
    projected = project(psi)
    cont_parts = []
    disc_parts = []
    gi = ci = 0
    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            mean, scale = _resolve_gaussian(lb, projected)
            cont_parts.append(mean[None, :] + scale[None, :] * noise.normals[gi])
            gi += 1
        else:
            probs = _resolve_probs(lb, projected)
            cum = np.cumsum(probs)
            idx = np.searchsorted(cum, noise.uniforms[ci], side="right")
            disc_parts.append(np.minimum(idx, lb.cardinality - 1))
            ci += 1
    cont = np.concatenate(cont_parts, axis=1) if cont_parts else np.zeros((noise.size, 0))
    return [
        LatentSample(cont[k], tuple(int(d[k]) for d in disc_parts))
        for k in range(noise.size)
    ]


def sample_latents(
    psi: SimParams,
    sim: SimulatorSpec,
    K: int,
    rng: np.random.Generator,
    ledger: SampleLedger | None = None,
) -> list[LatentSample]:
    """K i.i.d. draws from q_psi; charges the ledger when one is given."""
    if K < 1:
        raise ValueError("K must be >= 1")
    noise = draw_base_noise(sim, K, rng)
    if ledger is not None:
        ledger.charge(K)
    return latents_from_noise(psi, sim, noise)


# ---------------------------------------------------------------------------
# renderers


def _render_affine_point(s: LatentSample, consts: dict) -> DataPoint:
    u = float(s.continuous[0])
    x = consts.get("x_scale", 1.0) * u + consts.get("x_shift", 0.0)
    y = consts.get("y_scale", 0.0) * u + consts.get("y_shift", 0.0)
    return DataPoint(np.array([x]), np.array([y]))


def _render_source_mixture(s: LatentSample, consts: dict) -> DataPoint:
    beta = np.asarray(consts["beta"], dtype=np.float64)
    d = beta.size
    src = consts["sources"][s.discrete[0]]
    x = s.continuous[:d]
    y = src["slope"] * float(beta @ x) + src["bias"] + src["noise"] * float(s.continuous[d])
    return DataPoint(x.copy(), np.array([y]))


RENDERERS = {
    "affine_point": _render_affine_point,
    "source_mixture": _render_source_mixture,
}


def render(s: LatentSample, sim: SimulatorSpec) -> DataPoint:
    """Deterministic zeta = r(s); no rng, no psi dependence except through s."""
    return RENDERERS[sim.renderer](s, sim.renderer_constants)


def render_dataset(latents, sim: SimulatorSpec) -> list[DataPoint]:
    return [render(s, sim) for s in latents]


# ---------------------------------------------------------------------------
# log-density and score


def log_prob(psi: SimParams, sim: SimulatorSpec, s: LatentSample) -> float:
    projected = project(psi)
    total = 0.0
    off = 0
    ci = 0
    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            mean, scale = _resolve_gaussian(lb, projected)
            u = s.continuous[off : off + lb.dim]
            total += float(
                np.sum(
                    -np.log(scale)
                    - 0.5 * np.log(2.0 * np.pi)
                    - 0.5 * ((u - mean) / scale) ** 2
                )
            )
            off += lb.dim
        else:
            if isinstance(lb.logits, str):
                raw = psi.raw[psi.block_slice(lb.logits)]
            else:
                raw = np.asarray(lb.logits)
            j = s.discrete[ci]
            total += float(raw[j] - np.log(np.sum(np.exp(raw - np.max(raw)))) - np.max(raw))
            ci += 1
    return total


def score_matrix(psi: SimParams, sim: SimulatorSpec, latents) -> np.ndarray:
    """d/dpsi log q_psi(s_k) for every sample, w.r.t. the raw parameters.

    Shape (K, m). The chain rule through the projection is applied here:
    identity for means, softplus derivative for scales (zero once the scale
    floor clamps), softmax shift-invariant score for logits.
    """
    K = len(latents)
    projected = project(psi)
    S = np.zeros((K, psi.dim))
    cont = np.stack([s.continuous for s in latents]) if K else np.zeros((0, 0))
    off = 0
    ci = 0
    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            mean, scale = _resolve_gaussian(lb, projected)
            u = cont[:, off : off + lb.dim]
            if isinstance(lb.mean, str):
                sl = psi.block_slice(lb.mean)
                S[:, sl] = (u - mean[None, :]) / scale[None, :] ** 2
            if isinstance(lb.scale, str):
                sl = psi.block_slice(lb.scale)
                raw = psi.raw[sl]
                dscale = np.where(softplus(raw) > SCALE_FLOOR, 1.0 / (1.0 + np.exp(-raw)), 0.0)
                dlog_dscale = ((u - mean[None, :]) ** 2 - scale[None, :] ** 2) / scale[None, :] ** 3
                S[:, sl] = dlog_dscale * dscale[None, :]
            off += lb.dim
        else:
            if isinstance(lb.logits, str):
                sl = psi.block_slice(lb.logits)
                probs = projected[lb.logits]
                js = np.array([s.discrete[ci] for s in latents], dtype=int)
                onehot = np.zeros((K, lb.cardinality))
                onehot[np.arange(K), js] = 1.0
                S[:, sl] = onehot - probs[None, :]
            ci += 1
    return S


def log_prob_grad(psi: SimParams, sim: SimulatorSpec, s: LatentSample) -> np.ndarray:
    """Score of a single sample w.r.t. raw psi."""
    return score_matrix(psi, sim, [s])[0]


# ---------------------------------------------------------------------------
# serialization (structured-text round trip)


def sim_to_dict(sim: SimulatorSpec) -> dict:
    blocks = []
    for lb in sim.latent_blocks:
        if isinstance(lb, GaussianBlock):
            blocks.append(
                {
                    "kind": "gaussian",
                    "dim": lb.dim,
                    "mean": lb.mean if isinstance(lb.mean, str) else list(lb.mean),
                    "scale": lb.scale if isinstance(lb.scale, str) else list(lb.scale),
                }
            )
        else:
            blocks.append(
                {
                    "kind": "categorical",
                    "cardinality": lb.cardinality,
                    "logits": lb.logits if isinstance(lb.logits, str) else list(lb.logits),
                }
            )
    out = {
        "latent_blocks": blocks,
        "renderer": sim.renderer,
        "renderer_constants": sim.renderer_constants,
    }
    if sim.hidden_psi_star is not None:
        out["hidden_psi_star"] = list(sim.hidden_psi_star)
    return out


def sim_from_dict(doc: dict) -> SimulatorSpec:
    allowed = {"latent_blocks", "renderer", "renderer_constants", "hidden_psi_star"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
    blocks = []
    for b in doc["latent_blocks"]:
        kind = b.get("kind")
        if kind == "gaussian":
            blocks.append(
                GaussianBlock(
                    dim=int(b["dim"]),
                    mean=b["mean"] if isinstance(b["mean"], str) else tuple(b["mean"]),
                    scale=b["scale"] if isinstance(b["scale"], str) else tuple(b["scale"]),
                )
            )
        elif kind == "categorical":
            blocks.append(
                CategoricalBlock(
                    cardinality=int(b["cardinality"]),
                    logits=b["logits"] if isinstance(b["logits"], str) else tuple(b["logits"]),
                )
            )
        else:
            raise ConfigError(f"unknown latent block kind {kind!r}")
    star = doc.get("hidden_psi_star")
    return SimulatorSpec(
        latent_blocks=tuple(blocks),
        renderer=doc["renderer"],
        renderer_constants=doc.get("renderer_constants", {}),
        hidden_psi_star=tuple(star) if star is not None else None,
    )
