"""Point clouds and seeded samplers for toy low-dimensional distributions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ParameterError
from .rng import RngStream, as_generator

WEIGHT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Weighted empirical distribution on R^d.

    ``points`` has shape (N, d); ``weights`` has shape (N,) and sums to one.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ParameterError(f"points must be a non-empty (N, d) array, got shape {pts.shape}")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ParameterError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ParameterError("weights must be nonnegative and sum to 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points: Any) -> "PointCloud":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        if n == 0:
            raise ParameterError("cannot build an empty cloud")
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


def as_points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    return pts[:, None] if pts.ndim == 1 else pts


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("disc", "square", "gaussian", "spiral", "moons", "affine")


@dataclass(frozen=True, eq=False)
class ShapeSpec:
    """Description of a sampleable distribution.

    Only the fields relevant to ``kind`` are read:

    * ``disc``: ``center``, ``radius`` (uniform on the ball, any dimension)
    * ``square``: ``center``, ``radius`` as half-width (uniform on the cube)
    * ``gaussian``: ``mean``, ``cov``
    * ``spiral``: ``center``, ``radius`` (outer radius), ``turns``, ``noise``
    * ``moons``: ``center``, ``radius`` (moon radius), ``noise``
    * ``affine``: ``base`` pushed through ``x -> matrix @ x + offset``
    """

    kind: str
    center: tuple[float, ...] = (0.0, 0.0)
    radius: float = 1.0
    mean: tuple[float, ...] | None = None
    cov: tuple[tuple[float, ...], ...] | None = None
    turns: float = 1.5
    noise: float = 0.05
    base: "ShapeSpec | None" = None
    matrix: tuple[tuple[float, ...], ...] | None = None
    offset: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.kind in ("disc", "square", "spiral", "moons") and not self.radius > 0:
            raise ParameterError(f"{self.kind} radius must be positive, got {self.radius}")
        if self.noise < 0:
            raise ParameterError("noise must be nonnegative")
        if self.kind == "gaussian":
            if self.mean is None or self.cov is None:
                raise ParameterError("gaussian shape needs mean and cov")
            _gaussian_factor(np.asarray(self.mean, float), np.asarray(self.cov, float))
        if self.kind == "affine":
            if self.base is None or self.matrix is None:
                raise ParameterError("affine shape needs base and matrix")
            A = np.asarray(self.matrix, float)
            d = self.base.dim
            if A.shape != (d, d):
                raise ParameterError(f"affine matrix must be {d}x{d}, got {A.shape}")
            if self.offset is not None and len(self.offset) != d:
                raise ParameterError("affine offset dimension mismatch")
        if self.kind in ("spiral", "moons") and len(self.center) != 2:
            raise ParameterError(f"{self.kind} is only defined in two dimensions")

    @property
    def dim(self) -> int:
        if self.kind == "gaussian":
            return len(self.mean)
        if self.kind == "affine":
            return self.base.dim
        return len(self.center)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "gaussian":
            out["mean"] = list(self.mean)
            out["cov"] = [list(r) for r in self.cov]
        elif self.kind == "affine":
            out["base"] = self.base.to_dict()
            out["matrix"] = [list(r) for r in self.matrix]
            if self.offset is not None:
                out["offset"] = list(self.offset)
        else:
            out["center"] = list(self.center)
            out["radius"] = self.radius
            if self.kind in ("spiral", "moons"):
                out["noise"] = self.noise
            if self.kind == "spiral":
                out["turns"] = self.turns
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ShapeSpec":
        if not isinstance(data, dict) or "kind" not in data:
            raise ParameterError(f"shape description needs a 'kind' field: {data!r}")
        data = dict(data)
        kind = data.pop("kind")
        kw: dict[str, Any] = {}
        for key, value in data.items():
            if key == "base":
                kw["base"] = cls.from_dict(value)
            elif key in ("cov", "matrix"):
                arr = np.asarray(value, dtype=float)
                if arr.ndim == 0:
                    # scalar shorthand for an isotropic matrix; needs the mean/center size
                    size = len(data.get("mean", data.get("center", data.get("offset", ()))))
                    arr = float(arr) * np.eye(size)
                kw[key] = tuple(tuple(map(float, row)) for row in arr)
            elif key in ("center", "mean", "offset"):
                kw[key] = tuple(float(v) for v in value)
            elif key in ("radius", "turns", "noise", "half_width"):
                kw["radius" if key == "half_width" else key] = float(value)
            else:
                raise ParameterError(f"unknown shape field {key!r}")
        return cls(kind, **kw)


def disc(center: Sequence[float] = (0.0, 0.0), radius: float = 1.0) -> ShapeSpec:
    return ShapeSpec("disc", center=tuple(map(float, center)), radius=float(radius))


def square(center: Sequence[float] = (0.0, 0.0), half_width: float = 1.0) -> ShapeSpec:
    return ShapeSpec("square", center=tuple(map(float, center)), radius=float(half_width))


def gaussian(mean: Sequence[float], cov: Any) -> ShapeSpec:
    mean = tuple(map(float, mean))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(len(mean))
    return ShapeSpec("gaussian", mean=mean, cov=tuple(tuple(map(float, r)) for r in cov))


def spiral(center=(0.0, 0.0), radius: float = 1.0, turns: float = 1.5, noise: float = 0.05) -> ShapeSpec:
    return ShapeSpec("spiral", center=tuple(map(float, center)), radius=float(radius),
                     turns=float(turns), noise=float(noise))


def moons(center=(0.0, 0.0), radius: float = 1.0, noise: float = 0.05) -> ShapeSpec:
    return ShapeSpec("moons", center=tuple(map(float, center)), radius=float(radius), noise=float(noise))


def affine_of(base: ShapeSpec, matrix: Any, offset: Sequence[float] | None = None) -> ShapeSpec:
    A = np.asarray(matrix, dtype=float)
    if A.ndim == 0:
        A = float(A) * np.eye(base.dim)
    return ShapeSpec("affine", base=base, matrix=tuple(tuple(map(float, r)) for r in A),
                     offset=None if offset is None else tuple(map(float, offset)))


def _gaussian_factor(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ParameterError(f"covariance must be {d}x{d}, got {cov.shape}")
    scale = max(1.0, float(np.abs(cov).max()))
    if not np.allclose(cov, cov.T, atol=1e-12 * scale):
        raise ParameterError("covariance is not symmetric")
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-10 * scale:
        raise ParameterError(f"covariance is not positive semidefinite (min eigenvalue {evals.min():.3g})")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def _sample_raw(spec: ShapeSpec, n: int, gen: np.random.Generator) -> np.ndarray:
    kind = spec.kind
    if kind == "disc":
        c = np.asarray(spec.center)
        d = c.shape[0]
        direction = gen.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = spec.radius * gen.random(n) ** (1.0 / d)
        return c + direction * r[:, None]
    if kind == "square":
        c = np.asarray(spec.center)
        return c + spec.radius * gen.uniform(-1.0, 1.0, (n, c.shape[0]))
    if kind == "gaussian":
        mean = np.asarray(spec.mean)
        L = _gaussian_factor(mean, np.asarray(spec.cov))
        return mean + gen.standard_normal((n, mean.shape[0])) @ L.T
    if kind == "spiral":
        # Archimedean spiral r ∝ θ; sqrt sampling spreads points evenly along the arc.
        theta_max = 2.0 * math.pi * spec.turns
        theta = theta_max * np.sqrt(gen.random(n))
        r = spec.radius * theta / theta_max
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        return np.asarray(spec.center) + pts + spec.noise * gen.standard_normal((n, 2))
    if kind == "moons":
        # Two interleaved half circles, centred so the pair's bounding box sits on `center`.
        theta = math.pi * gen.random(n)
        upper = gen.random(n) < 0.5
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta)) - 0.5
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta)) - 0.25
        pts = spec.radius * np.stack([x, y], axis=1)
        return np.asarray(spec.center) + pts + spec.noise * gen.standard_normal((n, 2))
    base = _sample_raw(spec.base, n, gen)
    out = base @ np.asarray(spec.matrix).T
    if spec.offset is not None:
        out = out + np.asarray(spec.offset)
    return out


def sample_shape(spec: ShapeSpec, n: int, rng: RngStream | np.random.Generator | int) -> PointCloud:
    """Draw ``n`` i.i.d. samples from ``spec`` as a uniform-weight cloud."""
    if int(n) < 1:
        raise ParameterError(f"sample count must be >= 1, got {n}")
    return PointCloud.uniform(_sample_raw(spec, int(n), as_generator(rng)))


def sample_points(spec: ShapeSpec, n: int, gen: np.random.Generator) -> np.ndarray:
    """Raw (n, d) sample array; the hot path used inside training loops."""
    return _sample_raw(spec, n, gen)


def apply_map(cloud: PointCloud, A: Any, r: Any = None) -> PointCloud:
    """Push ``cloud`` through the affine map ``x -> A x + r``."""
    d = cloud.dim
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 0:
        A = A * np.eye(d)
    if A.shape != (d, d):
        raise ParameterError(f"map matrix must be {d}x{d}, got {A.shape}")
    pts = cloud.points @ A.T
    if r is not None:
        r = np.asarray(r, dtype=np.float64).reshape(-1)
        if r.shape[0] != d:
            raise ParameterError(f"offset must have dimension {d}, got {r.shape[0]}")
        pts = pts + r
    return PointCloud(pts, cloud.weights)


def empirical_moments(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and (biased, weight-normalised) covariance."""
    w = cloud.weights
    mean = w @ cloud.points
    centered = cloud.points - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, cov


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def save_csv(cloud: PointCloud, path: str | Path, include_weights: bool | None = None) -> None:
    """Write one row per point with columns ``x1..xd`` and optionally ``weight``."""
    if include_weights is None:
        include_weights = not cloud.is_uniform
    header = [f"x{i + 1}" for i in range(cloud.dim)]
    if include_weights:
        header.append("weight")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, p in enumerate(cloud.points):
            row = [repr(float(v)) for v in p]
            if include_weights:
                row.append(repr(float(cloud.weights[i])))
            writer.writerow(row)


def load_csv(path: str | Path) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ParameterError(f"{path}: no points")
    arr = np.asarray(rows)
    if header and header[-1] == "weight":
        return PointCloud(arr[:, :-1], arr[:, -1])
    return PointCloud.uniform(arr)


def save_text(cloud: PointCloud, path: str | Path) -> None:
    """Structured text format: ``#`` metadata lines, then whitespace-separated rows.

    Every row holds the d coordinates followed by the weight, printed with
    ``repr`` so values round-trip exactly.
    """
    lines = ["# pifm-cloud 1", f"# dim {cloud.dim}", f"# count {cloud.size}"]
    for p, w in zip(cloud.points, cloud.weights):
        lines.append(" ".join(repr(float(v)) for v in p) + " " + repr(float(w)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_text(path: str | Path) -> PointCloud:
    meta: dict[str, int] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] in ("dim", "count"):
                meta[parts[0]] = int(parts[1])
            continue
        if line.strip():
            rows.append([float(v) for v in line.split()])
    if "dim" not in meta or "count" not in meta:
        raise ParameterError(f"{path}: missing dim/count metadata")
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    if arr.shape != (meta["count"], meta["dim"] + 1):
        raise ParameterError(f"{path}: expected {meta['count']} rows of {meta['dim']} coords + weight")
    return PointCloud(arr[:, :-1], arr[:, -1])
