"""Multi-head vector-field networks.

A field maps a state ``x`` (d,) and a parameter point ``tvec`` (n,) to n
velocity vectors, one per head. ``ModelParams`` is a shared-backbone MLP whose
heads read the backbone features; ``AnalyticField`` wraps closed-form fields
with the same call/jvp interface for tests and baselines.

Every field object exposes::

    field(x, tvec)             -> (B, n, d)
    field.jvp(x, tvec, dx, dt) -> (B, n, d)   directional derivative along (dx, dt)

Checkpoint layout (all integers ASCII, payload little-endian float64)::

    PIFM-CHECKPOINT <version>\\n
    <one-line JSON header>\\n
    <count * 8 bytes: the flat parameter vector, layer by layer, W then b,
     each W stored row-major with shape (fan_in, fan_out)>

The JSON header holds n, d, width, depth, activation, head_hidden, fourier,
the layer shapes, ``count``, ``sha256`` of the payload, ``seed`` and the
training ``config`` echo.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, ParameterError
from .rng import RngStream, as_generator

CHECKPOINT_MAGIC = "PIFM-CHECKPOINT"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("silu", "tanh", "identity")


def _activation(name: str, z: np.ndarray):
    """Value, first and second derivative of the activation at ``z``."""
    if name == "silu":
        s = expit(z)
        one_minus = 1.0 - s
        return z * s, s * (1.0 + z * one_minus), s * one_minus * (2.0 + z * (1.0 - 2.0 * s))
    if name == "tanh":
        a = np.tanh(z)
        sech2 = 1.0 - a * a
        return a, sech2, -2.0 * a * sech2
    if name == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    raise ParameterError(f"unknown activation {name!r}")


def _layout(n: int, d: int, width: int, depth: int, head_hidden: int, fourier: int) -> list[tuple[int, int]]:
    shapes = []
    fan_in = d + n * (1 + 2 * fourier)
    for _ in range(depth):
        shapes.append((fan_in, width))
        fan_in = width
    for _ in range(n):
        for _ in range(head_hidden):
            shapes.append((width, width))
        shapes.append((width, d))
    return shapes


@dataclass(eq=False)
class ModelParams:
    n: int
    d: int
    width: int
    depth: int
    activation: str = "silu"
    head_hidden: int = 0
    fourier: int = 0
    theta: np.ndarray = field(default=None, repr=False)
    seed: int | None = None
    config: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.head_hidden < 0 or self.fourier < 0:
            raise ParameterError("width and depth must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        self.shapes = _layout(self.n, self.d, self.width, self.depth, self.head_hidden, self.fourier)
        self._offsets = []
        off = 0
        for fi, fo in self.shapes:
            self._offsets.append((off, off + fi * fo, off + fi * fo + fo))
            off += fi * fo + fo
        self.size = off
        if self.theta is None:
            self.theta = np.zeros(off)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (off,):
            raise ParameterError(f"parameter vector has {self.theta.shape} entries, layout needs {off}")

    @property
    def in_dim(self) -> int:
        return self.d + self.n

    def layer(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        start, mid, end = self._offsets[k]
        fi, fo = self.shapes[k]
        return self.theta[start:mid].reshape(fi, fo), self.theta[mid:end]

    def head_layers(self, i: int) -> list[int]:
        first = self.depth + i * (self.head_hidden + 1)
        return list(range(first, first + self.head_hidden + 1))

    def head_slice(self, i: int) -> slice:
        ks = self.head_layers(i)
        return slice(self._offsets[ks[0]][0], self._offsets[ks[-1]][2])

    def copy(self) -> "ModelParams":
        return ModelParams(self.n, self.d, self.width, self.depth, self.activation, self.head_hidden,
                           self.fourier, self.theta.copy(), self.seed, dict(self.config))

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        out = self.copy()
        out.theta = np.asarray(theta, dtype=np.float64).copy()
        return out

    def __call__(self, x, tvec) -> np.ndarray:
        return forward(self, x, tvec)

    def jvp(self, x, tvec, dx, dt) -> np.ndarray:
        return jvp(self, x, tvec, dx, dt)


def init_params(n: int, d: int, width: int, depth: int, rng: RngStream | np.random.Generator | int,
                activation: str = "silu", head_hidden: int = 0, fourier: int = 0) -> ModelParams:
    """Fan-in scaled Gaussian weights, zero biases."""
    if width < 1 or depth < 1:
        raise ParameterError("width and depth must be >= 1")
    params = ModelParams(n, d, width, depth, activation, head_hidden, fourier,
                         seed=rng.seed if isinstance(rng, RngStream) else None)
    gen = as_generator(rng, "params")
    for k, (fi, fo) in enumerate(params.shapes):
        W, _ = params.layer(k)
        W[...] = gen.standard_normal((fi, fo)) / math.sqrt(fi)
    return params


# ---------------------------------------------------------------------------
# Forward / reverse engine
# ---------------------------------------------------------------------------


def _prepare(params: ModelParams, x, tvec):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.d:
        raise ParameterError(f"state dimension {x.shape[1]} does not match model dimension {params.d}")
    t = np.asarray(tvec, dtype=np.float64)
    t = np.broadcast_to(t if t.ndim == 2 else t.reshape(1, -1), (x.shape[0], t.shape[-1]))
    if t.shape[1] != params.n:
        raise ParameterError(f"parameter point has {t.shape[1]} entries, model expects {params.n}")
    return x, t, single


def _embed(params: ModelParams, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    parts = [x, t]
    if params.fourier:
        freq = 2.0 * math.pi * np.arange(1, params.fourier + 1)
        arg = t[:, :, None] * freq
        parts += [np.sin(arg).reshape(len(t), -1), np.cos(arg).reshape(len(t), -1)]
    return np.concatenate(parts, axis=1)


def _embed_tangent(params: ModelParams, t: np.ndarray, dx: np.ndarray, dt: np.ndarray) -> np.ndarray:
    parts = [dx, dt]
    if params.fourier:
        freq = 2.0 * math.pi * np.arange(1, params.fourier + 1)
        arg = t[:, :, None] * freq
        K, B = dx.shape[:2]
        parts += [(np.cos(arg) * freq * dt[..., None]).reshape(K, B, -1),
                  (-np.sin(arg) * freq * dt[..., None]).reshape(K, B, -1)]
    return np.concatenate(parts, axis=-1)


class Trace:
    """Recorded evaluation of a network on a batch.

    ``values`` holds the head outputs. :meth:`push` propagates K tangent
    directions through the recorded pass, and :meth:`pullback` returns exact
    gradients of any scalar built from values and tangents.
    """

    def __init__(self, params: ModelParams, x: np.ndarray, t: np.ndarray):
        self.params = params
        self.x, self.t = x, t
        self.inp = _embed(params, x, t)
        self._primal: list[tuple] = []  # per layer: (input, z, d1, d2) ; d1/d2 None for linear outputs
        act = params.activation
        h = self.inp
        for k in range(params.depth):
            W, b = params.layer(k)
            z = h @ W + b
            a, d1, d2 = _activation(act, z)
            self._primal.append((h, z, d1, d2))
            h = a
        self.features = h
        outs = []
        for i in range(params.n):
            hh = h
            ks = params.head_layers(i)
            for k in ks[:-1]:
                W, b = params.layer(k)
                z = hh @ W + b
                a, d1, d2 = _activation(act, z)
                self._primal.append((hh, z, d1, d2))
                hh = a
            W, b = params.layer(ks[-1])
            self._primal.append((hh, None, None, None))
            outs.append(hh @ W + b)
        self.values = np.stack(outs, axis=1)
        self._tangent: list | None = None

    def push(self, dx: np.ndarray, dt: np.ndarray) -> np.ndarray:
        """Tangents of all heads along K input directions.

        ``dx`` has shape (K, B, d) and ``dt`` shape (K, B, n); returns (K, B, n, d).
        """
        params = self.params
        ht = _embed_tangent(params, self.t, dx, dt)
        tan: list = []
        for k in range(params.depth):
            W, _ = params.layer(k)
            _, _, d1, _ = self._primal[k]
            zt = ht @ W
            tan.append((ht, zt))
            ht = d1 * zt
        feat_t = ht
        outs = []
        for i in range(params.n):
            hht = feat_t
            ks = params.head_layers(i)
            for k in ks[:-1]:
                W, _ = params.layer(k)
                _, _, d1, _ = self._primal[k]
                zt = hht @ W
                tan.append((hht, zt))
                hht = d1 * zt
            W, _ = params.layer(ks[-1])
            tan.append((hht, None))
            outs.append(hht @ W)
        self._tangent = tan
        self.tangents = np.stack(outs, axis=2)
        return self.tangents

    def pullback(self, g_values: np.ndarray | None, g_tangents: np.ndarray | None = None):
        """Reverse sweep.

        Returns ``(grad_theta, grad_x, grad_dx)`` where ``grad_dx`` is the
        gradient with respect to the pushed tangent directions' state part
        (None when no tangents were pushed or none are weighted).
        """
        params = self.params
        use_tan = g_tangents is not None
        if use_tan and self._tangent is None:
            raise ParameterError("tangent gradients given but no tangents were pushed")
        grad = np.zeros_like(params.theta)
        B = self.x.shape[0]
        g_feat = np.zeros_like(self.features)
        g_feat_t = np.zeros(g_tangents.shape[:2] + (params.width,)) if use_tan else None

        def linear_back(k, h, ht, gz, gzt):
            start, mid, end = params._offsets[k]
            W, _ = params.layer(k)
            gW = h.T @ gz
            if gzt is not None:
                gW = gW + np.einsum("kbi,kbo->io", ht, gzt)
            grad[start:mid] += gW.reshape(-1)
            grad[mid:end] += gz.sum(axis=0)
            return gz @ W.T, (gzt @ W.T if gzt is not None else None)

        def act_back(k, ga, gat):
            _, z, d1, d2 = self._primal[k]
            gz = ga * d1
            gzt = None
            if gat is not None:
                zt = self._tangent[k][1]
                gz = gz + (gat * d2 * zt).sum(axis=0)
                gzt = gat * d1
            return gz, gzt

        for i in range(params.n):
            ks = params.head_layers(i)
            g = np.zeros((B, params.d)) if g_values is None else g_values[:, i]
            gt = g_tangents[:, :, i] if use_tan else None
            k = ks[-1]
            h = self._primal[k][0]
            ht = self._tangent[k][0] if use_tan else None
            g, gt = linear_back(k, h, ht, g, gt)
            for k in reversed(ks[:-1]):
                gz, gzt = act_back(k, g, gt)
                h = self._primal[k][0]
                ht = self._tangent[k][0] if use_tan else None
                g, gt = linear_back(k, h, ht, gz, gzt)
            g_feat += g
            if use_tan:
                g_feat_t += gt
        g, gt = g_feat, g_feat_t
        for k in reversed(range(params.depth)):
            gz, gzt = act_back(k, g, gt)
            h = self._primal[k][0]
            ht = self._tangent[k][0] if use_tan else None
            g, gt = linear_back(k, h, ht, gz, gzt)
        d = params.d
        return grad, g[:, :d], (gt[..., :d] if use_tan else None)


def trace(params: ModelParams, x, tvec) -> Trace:
    x, t, _ = _prepare(params, x, tvec)
    return Trace(params, x, t)


def forward(params: ModelParams, x, tvec) -> np.ndarray:
    """Evaluate all heads. Returns (B, n, d), or (n, d) for a single state."""
    x, t, single = _prepare(params, x, tvec)
    out = Trace(params, x, t).values
    return out[0] if single else out


def backward(params: ModelParams, x, tvec, upstream) -> np.ndarray:
    """Gradient of sum_b sum_i <upstream[b, i], u_i(x_b, t_b)> with respect to theta."""
    x, t, single = _prepare(params, x, tvec)
    g = np.asarray(upstream, dtype=np.float64)
    if single and g.ndim == 2:
        g = g[None]
    if g.shape != (x.shape[0], params.n, params.d):
        raise ParameterError(f"upstream gradient shape {g.shape} does not match outputs")
    grad, _, _ = Trace(params, x, t).pullback(g)
    return grad


def _directions(x: np.ndarray, t: np.ndarray, dx, dt):
    B = x.shape[0]
    dx = np.broadcast_to(np.asarray(dx, dtype=np.float64).reshape(-1, x.shape[1]) if np.ndim(dx) <= 1
                         else np.asarray(dx, dtype=np.float64), x.shape)
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64).reshape(-1, t.shape[1]) if np.ndim(dt) <= 1
                         else np.asarray(dt, dtype=np.float64), (B, t.shape[1]))
    return dx, dt


def jvp(params: ModelParams, x, tvec, dx, dt) -> np.ndarray:
    """Exact directional derivative of every head along the joint input direction (dx, dt)."""
    x, t, single = _prepare(params, x, tvec)
    dx, dt = _directions(x, t, dx, dt)
    tr = Trace(params, x, t)
    out = tr.push(dx[None], dt[None])[0]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Lie-bracket residual
# ---------------------------------------------------------------------------


def lie_residual(field, x, tvec, i: int, j: int) -> np.ndarray:
    """Integrability residual of heads i and j.

    d_{t_j} u_i - d_{t_i} u_j - [u_i, u_j] with [u, v] = (grad u) v - (grad v) u,
    assembled from two directional derivatives.
    """
    if i == j:
        raise ParameterError("lie_residual needs two distinct heads")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    B = x.shape[0]
    n = field.n
    t = np.broadcast_to(np.asarray(tvec, dtype=np.float64).reshape(-1, n) if np.ndim(tvec) <= 1
                        else np.asarray(tvec, dtype=np.float64), (B, n))
    u = field(x, t)
    ei = np.zeros((B, n))
    ei[:, i] = 1.0
    ej = np.zeros((B, n))
    ej[:, j] = 1.0
    r = field.jvp(x, t, -u[:, j], ej)[:, i] - field.jvp(x, t, -u[:, i], ei)[:, j]
    return r[0] if single else r


def head_pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def lie_loss(params: ModelParams, x, tvec, need_grad: bool = True):
    """Mean over batch and head pairs of the squared Lie residual, with exact gradient.

    Returns ``(value, grad_theta, trace, g_values)``. ``g_values`` is the part
    of the gradient that flows through the head outputs (the residual's
    directions depend on them); callers combining losses add their own
    output gradients to it and pull back once through ``trace``.
    """
    if params.n < 2:
        raise ParameterError("the path-independence loss needs n >= 2")
    tr = trace(params, x, tvec)
    B, n, d = tr.values.shape
    pairs = head_pairs(n)
    dx = -np.transpose(tr.values, (1, 0, 2))
    dt = np.broadcast_to(np.eye(n)[:, None, :], (n, B, n))
    T = tr.push(dx, dt)
    scale = 1.0 / (B * len(pairs))
    value = 0.0
    gT = np.zeros_like(T)
    for i, j in pairs:
        r = T[j][:, i] - T[i][:, j]
        value += float(np.sum(r * r)) * scale
        gT[j][:, i] += 2.0 * scale * r
        gT[i][:, j] -= 2.0 * scale * r
    if not need_grad:
        return value, None, tr, None
    grad, _, g_dx = tr.pullback(None, gT)
    g_values = -np.transpose(g_dx, (1, 0, 2))
    return value, grad, tr, g_values


# ---------------------------------------------------------------------------
# Analytic and composed fields
# ---------------------------------------------------------------------------


class ConstantHead:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def value(self, x, t):
        return np.broadcast_to(self.c, x.shape).copy()

    def jvp(self, x, t, dx, dt):
        return np.zeros_like(x)


class LinearHead:
    """u(x) = A x + c, independent of the parameter point."""

    def __init__(self, A, c=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.c = None if c is None else np.asarray(c, dtype=np.float64)

    def value(self, x, t):
        out = x @ self.A.T
        return out if self.c is None else out + self.c

    def jvp(self, x, t, dx, dt):
        return dx @ self.A.T


class FunctionHead:
    """Head from a callable ``fn(x, t)`` on (B, d), (B, n) arrays.

    ``jac_x(x, t)`` -> (B, d, d) and ``jac_t(x, t)`` -> (B, d, n); a missing
    Jacobian is taken to be zero.
    """

    def __init__(self, fn: Callable, jac_x: Callable | None = None, jac_t: Callable | None = None):
        self.fn, self.jac_x, self.jac_t = fn, jac_x, jac_t

    def value(self, x, t):
        return np.asarray(self.fn(x, t), dtype=np.float64)

    def jvp(self, x, t, dx, dt):
        out = np.zeros_like(x)
        if self.jac_x is not None:
            out = out + np.einsum("bij,bj->bi", self.jac_x(x, t), dx)
        if self.jac_t is not None:
            out = out + np.einsum("bij,bj->bi", self.jac_t(x, t), dt)
        return out


class AnalyticField:
    """Closed-form multi-head field with the network's call/jvp interface."""

    def __init__(self, heads: Sequence, d: int | None = None):
        self.heads = list(heads)
        self.n = len(self.heads)
        if d is None:
            first = self.heads[0]
            d = first.c.shape[0] if isinstance(first, ConstantHead) else first.A.shape[0]
        self.d = d

    @classmethod
    def constant(cls, vectors) -> "AnalyticField":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return cls([ConstantHead(v) for v in vectors], d=vectors.shape[1])

    @classmethod
    def linear(cls, matrices) -> "AnalyticField":
        return cls([LinearHead(A) for A in matrices])

    def _prep(self, x, tvec):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        t = np.asarray(tvec, dtype=np.float64)
        t = np.broadcast_to(t if t.ndim == 2 else t.reshape(1, -1), (x.shape[0], self.n))
        return x, t, single

    def __call__(self, x, tvec) -> np.ndarray:
        x, t, single = self._prep(x, tvec)
        out = np.stack([h.value(x, t) for h in self.heads], axis=1)
        return out[0] if single else out

    def jvp(self, x, tvec, dx, dt) -> np.ndarray:
        x, t, single = self._prep(x, tvec)
        dx = np.broadcast_to(np.asarray(dx, dtype=np.float64), x.shape)
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), t.shape)
        out = np.stack([h.jvp(x, t, dx, dt) for h in self.heads], axis=1)
        return out[0] if single else out


class ComposedField:
    """Stack of independently trained single-parameter fields.

    Head i is ``models[i]`` evaluated at the i-th coordinate of the parameter
    point only, which is how separately trained flows get composed.
    """

    def __init__(self, models: Sequence):
        for m in models:
            if m.n != 1:
                raise ParameterError("composed fields are built from single-parameter models")
        self.models = list(models)
        self.n = len(self.models)
        self.d = self.models[0].d

    def __call__(self, x, tvec) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(tvec, dtype=np.float64).reshape(-1, self.n) if np.ndim(tvec) <= 1
                            else np.asarray(tvec, dtype=np.float64), (x.shape[0], self.n))
        return np.stack([m(x, t[:, i:i + 1])[:, 0] for i, m in enumerate(self.models)], axis=1)

    def jvp(self, x, tvec, dx, dt) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(tvec, dtype=np.float64).reshape(-1, self.n) if np.ndim(tvec) <= 1
                            else np.asarray(tvec, dtype=np.float64), (x.shape[0], self.n))
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), t.shape)
        return np.stack([m.jvp(x, t[:, i:i + 1], dx, dt[:, i:i + 1])[:, 0]
                         for i, m in enumerate(self.models)], axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    payload = params.theta.astype("<f8").tobytes()
    header = {
        "n": params.n,
        "d": params.d,
        "width": params.width,
        "depth": params.depth,
        "activation": params.activation,
        "head_hidden": params.head_hidden,
        "fourier": params.fourier,
        "shapes": [list(s) for s in params.shapes],
        "count": params.size,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "seed": params.seed,
        "config": params.config,
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path) -> ModelParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    first, sep, rest = raw.partition(b"\n")
    parts = first.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if parts[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: format version {parts[1]} is not supported (expected {CHECKPOINT_VERSION})")
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header: dict[str, Any] = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    count = header.get("count")
    if len(payload) != 8 * int(count or 0):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header promises {8 * int(count or 0)}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    try:
        params = ModelParams(header["n"], header["d"], header["width"], header["depth"], header["activation"],
                             header["head_hidden"], header["fourier"],
                             np.frombuffer(payload, dtype="<f8").astype(np.float64),
                             header.get("seed"), header.get("config") or {})
    except (KeyError, ParameterError) as exc:
        raise CheckpointError(f"{path}: inconsistent header ({exc})") from exc
    if [list(s) for s in params.shapes] != header["shapes"]:
        raise CheckpointError(f"{path}: layer shapes do not match the declared architecture")
    return params
