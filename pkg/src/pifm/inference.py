"""Integration of multi-parameter fields along piecewise-linear parameter paths."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ParameterError
from .geometry import PointCloud, as_points, save_csv

DEFAULT_STEPS = 100
INTEGRATORS = ("euler", "midpoint")


@dataclass(frozen=True, eq=False)
class PathSpec:
    """Waypoints in parameter space joined by straight segments.

    ``steps_per_segment`` is one count for every segment or one per segment.
    Paths normally start at the origin; other starts are allowed so a cloud
    already sitting at some parameter point can be carried onward.
    """

    waypoints: np.ndarray
    steps_per_segment: Union[int, tuple] = DEFAULT_STEPS

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.waypoints, dtype=np.float64))
        if w.shape[0] == 0:
            raise ParameterError("a path needs at least one waypoint")
        if not np.all(np.isfinite(w)):
            raise ParameterError("waypoints must be finite")
        if np.any(np.all(np.diff(w, axis=0) == 0, axis=1)):
            raise ParameterError("consecutive waypoints must differ")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)
        steps = self.steps_per_segment
        counts = (int(steps),) * (len(w) - 1) if np.isscalar(steps) else tuple(int(s) for s in steps)
        if len(counts) != len(w) - 1:
            raise ParameterError(f"{len(counts)} step counts for {len(w) - 1} segments")
        if any(c < 1 for c in counts):
            raise ParameterError("steps per segment must be positive")
        object.__setattr__(self, "steps_per_segment", counts)

    @property
    def n(self) -> int:
        return self.waypoints.shape[1]

    @property
    def total_steps(self) -> int:
        return sum(self.steps_per_segment)

    @classmethod
    def through(cls, *points, steps: int | Sequence[int] = DEFAULT_STEPS) -> "PathSpec":
        return cls(np.asarray(points, dtype=np.float64), steps)

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "steps_per_segment": list(self.steps_per_segment)}

    @classmethod
    def from_dict(cls, data: dict) -> "PathSpec":
        steps = data.get("steps_per_segment", DEFAULT_STEPS)
        return cls(np.asarray(data["waypoints"], dtype=np.float64), steps if np.isscalar(steps) else tuple(steps))


@dataclass(frozen=True)
class AxisOrder:
    """Move one coordinate at a time, in ``order`` (1-based axis labels)."""

    order: tuple
    terminal: tuple

    def __post_init__(self):
        order = tuple(int(k) for k in self.order)
        if sorted(order) != list(range(1, len(order) + 1)):
            raise ParameterError(f"axis order {order} is not a permutation of 1..{len(order)}")
        if len(self.terminal) != len(order):
            raise ParameterError("terminal point and axis order have different lengths")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "terminal", tuple(float(v) for v in self.terminal))

    @property
    def label(self) -> str:
        return "order:" + ",".join(str(k) for k in self.order)


@dataclass(frozen=True)
class Diagonal:
    terminal: tuple

    def __post_init__(self):
        object.__setattr__(self, "terminal", tuple(float(v) for v in self.terminal))

    @property
    def label(self) -> str:
        return "diagonal"


@dataclass(frozen=True, eq=False)
class Custom:
    path: PathSpec
    name: str = "custom"

    @property
    def label(self) -> str:
        return f"path:{self.name}"


Strategy = Union[AxisOrder, Diagonal, Custom]


def _split_steps(total: int, segments: int) -> tuple:
    if segments == 0:
        return ()
    base, extra = divmod(max(int(total), segments), segments)
    return tuple(base + (1 if k < extra else 0) for k in range(segments))


def strategy_to_path(strategy: Strategy, n: int, steps: int = DEFAULT_STEPS) -> PathSpec:
    """Waypoints for a strategy; the step budget is split evenly over segments."""
    if isinstance(strategy, Custom):
        if strategy.path.n != n:
            raise ParameterError(f"path has {strategy.path.n} parameters, expected {n}")
        return strategy.path
    T = np.asarray(strategy.terminal, dtype=np.float64)
    if T.shape != (n,):
        raise ParameterError(f"terminal point has {T.size} entries, expected {n}")
    points = [np.zeros(n)]
    if isinstance(strategy, Diagonal):
        points.append(T.copy())
    else:
        if len(strategy.order) != n:
            raise ParameterError(f"axis order covers {len(strategy.order)} axes, expected {n}")
        cur = np.zeros(n)
        for axis in strategy.order:
            cur = cur.copy()
            cur[axis - 1] = T[axis - 1]
            points.append(cur)
    kept = [points[0]]
    for p in points[1:]:
        if not np.array_equal(p, kept[-1]):
            kept.append(p)
    return PathSpec(np.array(kept), _split_steps(steps, len(kept) - 1))


def all_orders(n: int, terminal) -> list[AxisOrder]:
    return [AxisOrder(p, tuple(terminal)) for p in itertools.permutations(range(1, n + 1))]


def parse_strategy(text: str, terminal, steps: int = DEFAULT_STEPS) -> Strategy:
    """Parse ``order:<perm>``, ``diagonal`` or ``path:<json file>``."""
    text = text.strip()
    if text == "diagonal":
        return Diagonal(tuple(terminal))
    if text.startswith("order:"):
        order = tuple(int(k) for k in text[len("order:"):].replace(" ", "").split(",") if k)
        return AxisOrder(order, tuple(terminal))
    if text.startswith("path:"):
        fname = text[len("path:"):]
        with open(fname) as fh:
            data = json.load(fh)
        data.setdefault("steps_per_segment", steps)
        return Custom(PathSpec.from_dict(data), Path(fname).stem)
    raise ParameterError(f"unknown strategy {text!r}; use order:<perm>, diagonal or path:<file>")


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)  # (ParamPoint, PointCloud) pairs

    @property
    def endpoint(self) -> PointCloud:
        return self.snapshots[-1][1]

    def __len__(self) -> int:
        return len(self.snapshots)

    def export(self, directory: str | Path, strategy: str = "custom", every: int = 1) -> None:
        """One CSV per snapshot plus ``manifest.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, (tvec, cloud) in enumerate(self.snapshots):
            if k % every and k != len(self.snapshots) - 1:
                continue
            name = f"snapshot_{k:05d}.csv"
            save_csv(cloud, out / name)
            entries.append({"index": k, "tvec": [float(v) for v in tvec], "file": name})
        manifest = {"strategy": strategy, "steps": len(self.snapshots) - 1, "snapshots": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _velocity(field, x: np.ndarray, gamma: np.ndarray, direction: np.ndarray) -> np.ndarray:
    u = field(x, gamma)
    return np.einsum("i,bid->bd", direction, u)


def _run(field, x: np.ndarray, path: PathSpec, method: str, record: Callable | None):
    if method not in INTEGRATORS:
        raise ParameterError(f"unknown integrator {method!r}")
    w = path.waypoints
    for seg, K in enumerate(path.steps_per_segment):
        start, delta = w[seg], w[seg + 1] - w[seg]
        h = 1.0 / K
        for k in range(K):
            gamma = start + (k * h) * delta
            if method == "euler":
                x = x + h * _velocity(field, x, gamma, delta)
            else:
                mid = x + (0.5 * h) * _velocity(field, x, gamma, delta)
                x = x + h * _velocity(field, mid, start + ((k + 0.5) * h) * delta, delta)
            if record is not None:
                record(start + ((k + 1) * h) * delta, x)
    return x


def _check_dims(field, cloud_pts: np.ndarray, path: PathSpec) -> None:
    if getattr(field, "d", cloud_pts.shape[1]) != cloud_pts.shape[1]:
        raise ParameterError(f"field dimension {field.d} does not match cloud dimension {cloud_pts.shape[1]}")
    if getattr(field, "n", path.n) != path.n:
        raise ParameterError(f"field has {field.n} parameters, path has {path.n}")


def integrate_path(field, cloud: PointCloud | np.ndarray, path: PathSpec, method: str = "euler") -> Trajectory:
    """Carry every point along the path; one snapshot per step plus the start."""
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud.uniform(cloud)
    _check_dims(field, cloud.points, path)
    traj = Trajectory([(path.waypoints[0].copy(), cloud)])

    def record(tvec, x):
        traj.snapshots.append((tvec, PointCloud(x, cloud.weights)))

    _run(field, np.array(cloud.points), path, method, record)
    return traj


def transport(field, points: np.ndarray, path: PathSpec, method: str = "euler") -> np.ndarray:
    """Endpoint positions only, without building snapshots."""
    pts = as_points(points)
    _check_dims(field, pts, path)
    return _run(field, np.array(pts), path, method, None)


def generate(field, cloud: PointCloud | np.ndarray, strategy: Strategy, steps: int = DEFAULT_STEPS,
             method: str = "euler") -> PointCloud:
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud.uniform(cloud)
    path = strategy_to_path(strategy, field.n, steps)
    return PointCloud(transport(field, cloud.points, path, method), cloud.weights)


def generate_grid(field, cloud: PointCloud | np.ndarray, grid: Sequence, strategy: str | Callable = "diagonal",
                  steps: int = DEFAULT_STEPS, method: str = "euler") -> dict:
    """Endpoint for every grid point, keyed by the point as a tuple.

    ``strategy`` is a strategy text (``diagonal`` or ``order:<perm>``) applied
    with each grid point as terminal, or a callable mapping a terminal to a
    strategy.
    """
    grid = [tuple(float(v) for v in g) for g in grid]
    if not grid:
        raise ParameterError("empty parameter grid")
    make = strategy if callable(strategy) else (lambda T: parse_strategy(strategy, T, steps))
    return {T: generate(field, cloud, make(T), steps, method) for T in grid}


def simplex_grid(spacing: float = 0.25, n: int = 2) -> list[tuple]:
    """Points of the regular lattice with the given spacing inside the closed simplex."""
    m = int(round(1.0 / spacing))
    if not np.isclose(m * spacing, 1.0):
        raise ParameterError("spacing must divide 1")
    pts = []
    for combo in itertools.product(range(m + 1), repeat=n):
        if sum(combo) <= m:
            pts.append(tuple(c / m for c in combo))
    return pts


def parse_grid(text: str, n: int = 2) -> list[tuple]:
    """``simplex:<spacing>`` optionally followed by ``+t,s;t,s`` exterior points, or ``t,s;t,s;...``."""
    text = text.strip()
    extra = ""
    if text.startswith("simplex:"):
        body, _, extra = text[len("simplex:"):].partition("+")
        pts = simplex_grid(float(body), n)
    else:
        pts, extra = [], text
    for item in filter(None, (s.strip() for s in extra.split(";"))):
        p = tuple(float(v) for v in item.split(","))
        if len(p) != n:
            raise ParameterError(f"grid point {item!r} does not have {n} entries")
        pts.append(p)
    if not pts:
        raise ParameterError("empty parameter grid")
    return pts
