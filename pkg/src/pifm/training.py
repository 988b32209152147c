"""Conditional paths, the PiFM objective and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, TrainingError
from .geometry import PointCloud, ShapeSpec, as_points, sample_points
from .model import ModelParams, init_params, lie_loss, trace
from .rng import RngStream
from .transport import CoupledBatch, CoupledTuple, CouplingMode, minibatch_couple

PATH_KINDS = ("affine", "rotation-scaling")


@dataclass(frozen=True)
class TrainConfig:
    n: int = 2
    batch_size: int = 256
    steps: int = 2000
    lr: float = 2e-4
    sigma: float = 0.05
    lam: float = 0.0
    coupling: str = "ot"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    width: int = 64
    depth: int = 3
    activation: str = "silu"
    head_hidden: int = 0
    fourier: int = 0
    grad_clip: float = 1.0
    warmup: int = 0
    path: str = "affine"
    path_angle: float = math.pi
    path_scale: float = 3.0

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("n must be >= 1")
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.coupling not in ("independent", "ot", "prescribed"):
            raise ParameterError(f"unknown coupling {self.coupling!r}")
        if self.path not in PATH_KINDS:
            raise ParameterError(f"unknown conditional path {self.path!r}; choose from {PATH_KINDS}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    fm: float
    pi: float
    lam: float

    @property
    def total(self) -> float:
        return self.fm + self.lam * self.pi


# ---------------------------------------------------------------------------
# Conditional paths
# ---------------------------------------------------------------------------


def _batch_arrays(z: CoupledTuple | CoupledBatch, tvec):
    if isinstance(z, CoupledTuple):
        a = np.asarray(z.a, dtype=np.float64)[None]
        b = np.stack([np.asarray(bi, dtype=np.float64) for bi in z.b])[None]
    else:
        a, b = z.a, z.b
    t = np.asarray(tvec, dtype=np.float64)
    t = np.broadcast_to(t if t.ndim == 2 else t.reshape(1, -1), (a.shape[0], b.shape[1]))
    return a, b, t, isinstance(z, CoupledTuple)


def cond_mu(z: CoupledTuple | CoupledBatch, tvec) -> np.ndarray:
    """a + sum_i t_i (b_i - a)."""
    a, b, t, single = _batch_arrays(z, tvec)
    mu = a + np.einsum("bi,bid->bd", t, b - a[:, None])
    return mu[0] if single else mu


def sample_conditional_x(z, tvec, sigma: float, rng) -> np.ndarray:
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    mu = cond_mu(z, tvec)
    if sigma == 0:
        return mu
    gen = rng if isinstance(rng, np.random.Generator) else (
        rng.generator() if isinstance(rng, RngStream) else RngStream(int(rng), "noise").generator())
    return mu + sigma * gen.standard_normal(mu.shape)


def cond_fields(z: CoupledTuple | CoupledBatch) -> np.ndarray:
    """Constant conditional velocities b_i - a, shape (n, d) or (B, n, d)."""
    if isinstance(z, CoupledTuple):
        return np.stack([np.asarray(bi, dtype=np.float64) for bi in z.b]) - np.asarray(z.a, dtype=np.float64)
    return z.b - z.a[:, None]


class AffinePath:
    """Gaussian path around the affine interpolant, constant conditional velocities."""

    name = "affine"

    def mean(self, a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
        return a + np.einsum("bi,bid->bd", t, b - a[:, None])

    def velocities(self, a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
        return b - a[:, None]


class RotationScalingPath:
    """Two-parameter planar path that rotates with t and scales with s.

    mu(t, s) = (1 + (k - 1) s) R(angle * t) a, so the (1, 0) corner is the
    rotation R(angle) a, the (0, 1) corner is k a and (1, 1) is k R(angle) a.
    Its conditional velocities depend on the parameter point but still commute.
    The target samples ``b`` are not used; they are implied by the corners.
    """

    name = "rotation-scaling"

    def __init__(self, angle: float = math.pi, scale: float = 3.0):
        self.angle = float(angle)
        self.scale = float(scale)

    def _rotated(self, a, t):
        c, s = np.cos(self.angle * t[:, 0]), np.sin(self.angle * t[:, 0])
        return np.stack([c * a[:, 0] - s * a[:, 1], s * a[:, 0] + c * a[:, 1]], axis=1)

    def mean(self, a, b, t):
        return (1.0 + (self.scale - 1.0) * t[:, 1:2]) * self._rotated(a, t)

    def velocities(self, a, b, t):
        ra = self._rotated(a, t)
        perp = np.stack([-ra[:, 1], ra[:, 0]], axis=1)
        u = self.angle * (1.0 + (self.scale - 1.0) * t[:, 1:2]) * perp
        v = (self.scale - 1.0) * ra
        return np.stack([u, v], axis=1)


def make_path(config: TrainConfig, d: int):
    if config.path == "affine":
        return AffinePath()
    if config.n != 2 or d != 2:
        raise ParameterError("the rotation-scaling path needs n = 2 and d = 2")
    return RotationScalingPath(config.path_angle, config.path_scale)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    """Regression batch: states x at parameter points tvec with conditional velocities."""

    x: np.ndarray
    tvec: np.ndarray
    velocity: np.ndarray

    @classmethod
    def from_coupled(cls, z: CoupledBatch, tvec, x) -> "TrainBatch":
        t = np.broadcast_to(np.asarray(tvec, dtype=np.float64), (len(z), z.b.shape[1]))
        return cls(np.asarray(x, dtype=np.float64), np.array(t), cond_fields(z))


def _fm_terms(values: np.ndarray, batch: TrainBatch):
    diff = values - batch.velocity
    B = diff.shape[0]
    return float(np.sum(diff * diff)) / B, (2.0 / B) * diff


def fm_loss(params: ModelParams, batch: TrainBatch) -> tuple[float, np.ndarray]:
    """Mean over the batch of sum_i ||u_i(x, t) - (b_i - a)||^2 and its gradient."""
    if len(batch.x) == 0:
        raise ParameterError("empty batch")
    tr = trace(params, batch.x, batch.tvec)
    value, g = _fm_terms(tr.values, batch)
    grad, _, _ = tr.pullback(g)
    return value, grad


def pi_loss(params: ModelParams, batch: TrainBatch) -> tuple[float, np.ndarray]:
    """Mean squared Lie residual over the batch and all head pairs, and its gradient."""
    value, grad, tr, g_values = lie_loss(params, batch.x, batch.tvec)
    extra, _, _ = tr.pullback(g_values)
    return value, grad + extra


def pifm_loss(params: ModelParams, batch: TrainBatch, lam: float,
              need_grad: bool = True) -> tuple[LossBreakdown, np.ndarray | None]:
    """fm + lam * pi with one shared forward pass.

    The path-independence term is still evaluated (for reporting) when
    ``lam`` is zero, but contributes no gradient.
    """
    if params.n >= 2:
        pi, g_pi, tr, g_vals = lie_loss(params, batch.x, batch.tvec, need_grad=need_grad and lam > 0)
    else:
        pi, g_pi, g_vals = 0.0, None, None
        tr = trace(params, batch.x, batch.tvec)
    fm, g_fm = _fm_terms(tr.values, batch)
    loss = LossBreakdown(fm, pi, lam)
    if not need_grad:
        return loss, None
    upstream = g_fm if g_vals is None else g_fm + lam * g_vals
    grad, _, _ = tr.pullback(upstream)
    if g_pi is not None:
        grad = grad + lam * g_pi
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 warmup: int = 0):
        self.lr, self.beta1, self.beta2, self.eps, self.warmup = lr, beta1, beta2, eps, warmup
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup else self.lr
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class _Sampler:
    def __init__(self, source: ShapeSpec | PointCloud | np.ndarray):
        self.source = source
        if not isinstance(source, ShapeSpec):
            self.cloud = source if isinstance(source, PointCloud) else PointCloud.uniform(source)

    @property
    def dim(self) -> int:
        return self.source.dim if isinstance(self.source, ShapeSpec) else self.cloud.dim

    def draw(self, count: int, gen: np.random.Generator) -> np.ndarray:
        if isinstance(self.source, ShapeSpec):
            return sample_points(self.source, count, gen)
        if self.cloud.is_uniform:
            idx = gen.integers(0, self.cloud.size, count)
        else:
            idx = gen.choice(self.cloud.size, count, p=self.cloud.weights)
        return self.cloud.points[idx]


def coupling_mode(config: TrainConfig, maps: Sequence | None = None) -> CouplingMode:
    if config.coupling == "prescribed":
        if not maps or len(maps) != config.n:
            raise ParameterError(f"prescribed coupling needs exactly {config.n} maps")
        return CouplingMode.prescribed(maps)
    return CouplingMode(config.coupling)


def train(config: TrainConfig, source, targets: Sequence = (), maps: Sequence | None = None,
          init: ModelParams | None = None) -> tuple[ModelParams, list[LossBreakdown]]:
    """Fit an n-head field with Adam on fm + lam * pi.

    ``source`` and ``targets`` are shape specs (fresh samples every step) or
    point clouds (resampled with replacement). With prescribed coupling the
    targets are the images of the source batch under ``maps`` and ``targets``
    may be empty.
    """
    mode = coupling_mode(config, maps)
    if mode.kind != "prescribed" and len(targets) != config.n:
        raise ParameterError(f"expected {config.n} targets, got {len(targets)}")
    src = _Sampler(source)
    tgts = [_Sampler(t) for t in targets] if mode.kind != "prescribed" else []
    d = src.dim
    for t in tgts:
        if t.dim != d:
            raise ParameterError("source and target dimensions differ")
    path = make_path(config, d)
    root = RngStream(config.seed)
    if init is None:
        params = init_params(config.n, d, config.width, config.depth, root.child("params"),
                             config.activation, config.head_hidden, config.fourier)
    else:
        params = init.copy()
    params.seed = config.seed
    params.config = config.to_dict()
    data_gen = root.child("data").generator()
    noise_gen = root.child("noise").generator()
    t_gen = root.child("tvec").generator()
    couple_gen = root.child("coupling").generator()
    opt = Adam(params.size, config.lr, config.beta1, config.beta2, config.eps, config.warmup)
    history: list[LossBreakdown] = []
    B, n = config.batch_size, config.n
    for step in range(config.steps):
        a = src.draw(B, data_gen)
        z = minibatch_couple(a, [t.draw(B, data_gen) for t in tgts], mode, couple_gen, n_targets=n)
        tvec = t_gen.random((B, n))
        mu = path.mean(z.a, z.b, tvec)
        x = mu + config.sigma * noise_gen.standard_normal(mu.shape) if config.sigma > 0 else mu
        batch = TrainBatch(x, tvec, path.velocities(z.a, z.b, tvec))
        loss, grad = pifm_loss(params, batch, config.lam)
        if not (math.isfinite(loss.total) and np.all(np.isfinite(grad))):
            raise TrainingError(step, f"non-finite loss (fm={loss.fm}, pi={loss.pi})")
        opt.step(params.theta, clip_by_norm(grad, config.grad_clip))
        history.append(loss)
    return params, history


def train_cfm(config: TrainConfig, source, target) -> tuple[ModelParams, list[LossBreakdown]]:
    """Single-parameter conditional flow matching baseline (independent or OT coupling)."""
    if config.coupling == "prescribed":
        raise ParameterError("the single-parameter baseline uses independent or ot coupling")
    return train(replace(config, n=1, lam=0.0, path="affine"), source, [target])


def save_history_csv(history: Sequence[LossBreakdown], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "fm", "pi", "total"])
        for k, h in enumerate(history):
            w.writerow([k, repr(h.fm), repr(h.pi), repr(h.total)])


def load_history_csv(path: str | Path, lam: float = 0.0) -> list[LossBreakdown]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossBreakdown(float(r["fm"]), float(r["pi"]), lam) for r in rows]
