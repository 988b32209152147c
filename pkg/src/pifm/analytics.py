"""Path-dependence gaps, Gaussian barycenter oracle and barycenter agreement reports."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .geometry import PointCloud, ShapeSpec, as_points, sample_shape
from .inference import DEFAULT_STEPS, Diagonal, PathSpec, all_orders, generate, transport
from .rng import RngStream
from .transport import free_support_barycenter, sliced_w2, w2_exact

EXACT_LIMIT = 1024
MAX_ORDER_PARAMS = 4


def distance(X, Y, metric: str = "auto", rng=None) -> float:
    """W2 between clouds: exact assignment up to 1024 points, sliced beyond."""
    x, y = as_points(X), as_points(Y)
    if metric == "auto":
        metric = "exact" if len(x) == len(y) and len(x) <= EXACT_LIMIT else "sliced"
    if metric == "exact":
        return w2_exact(X, Y)
    if metric == "sliced":
        return sliced_w2(X, Y, 256, rng if rng is not None else RngStream(0, "projections"))
    raise ParameterError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# Commutativity
# ---------------------------------------------------------------------------


@dataclass
class CommutativityReport:
    tvec: tuple
    endpoints: dict = field(repr=False)
    gaps: dict = field(default_factory=dict)
    target_w2: dict = field(default_factory=dict)

    @property
    def max_gap(self) -> float:
        return max(self.gaps.values(), default=0.0)

    def gap(self, s1: str, s2: str) -> float:
        if s1 == s2:
            return 0.0
        return self.gaps.get(f"{s1}|{s2}", self.gaps.get(f"{s2}|{s1}"))

    def to_dict(self) -> dict:
        return {
            "tvec": list(self.tvec),
            "gaps": dict(self.gaps),
            "max_gap": self.max_gap,
            "target_w2": dict(self.target_w2),
        }


def commutativity_gap(field, cloud: PointCloud | np.ndarray, tvec, steps: int = DEFAULT_STEPS,
                      metric: str = "auto", reference: PointCloud | None = None,
                      method: str = "euler") -> CommutativityReport:
    """Endpoints of every axis ordering and the diagonal, with all pairwise W2 gaps."""
    n = field.n
    if n > MAX_ORDER_PARAMS:
        raise ParameterError(f"enumerating {math.factorial(n)} orderings is not supported (n <= {MAX_ORDER_PARAMS})")
    tvec = tuple(float(v) for v in tvec)
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud.uniform(cloud)
    strategies = all_orders(n, tvec) + [Diagonal(tvec)]
    endpoints = {s.label: generate(field, cloud, s, steps, method) for s in strategies}
    labels = list(endpoints)
    gaps = {}
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            gaps[f"{labels[i]}|{labels[j]}"] = distance(endpoints[labels[i]], endpoints[labels[j]], metric)
    target = {}
    if reference is not None:
        target = {k: distance(v, reference, metric) for k, v in endpoints.items()}
    return CommutativityReport(tvec, endpoints, gaps, target)


# ---------------------------------------------------------------------------
# Gaussian oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Gaussians N(m_k, cov) sharing one covariance; ``means[0]`` is the source."""

    means: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.cov, dtype=np.float64)
        if c.ndim == 0:
            c = c * np.eye(m.shape[1])
        if c.shape != (m.shape[1], m.shape[1]) or not np.allclose(c, c.T):
            raise ParameterError("covariance must be a symmetric d x d matrix")
        if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
            raise ParameterError("covariance must be positive semidefinite")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "cov", c)

    @property
    def n(self) -> int:
        return self.means.shape[0] - 1

    def shape(self, k: int) -> ShapeSpec:
        return ShapeSpec("gaussian", mean=tuple(self.means[k]), cov=self.cov.tolist())

    def shapes(self) -> list[ShapeSpec]:
        return [self.shape(k) for k in range(self.n + 1)]


def gaussian_barycenter_oracle(spec: GaussianSpec, tvec) -> tuple[np.ndarray, np.ndarray]:
    """Mean (1 - sum t) m_0 + sum t_i m_i and the shared covariance, for any tvec."""
    t = np.asarray(tvec, dtype=np.float64).reshape(-1)
    if t.shape[0] != spec.n:
        raise ParameterError(f"parameter point has {t.shape[0]} entries, spec has {spec.n} targets")
    mean = (1.0 - t.sum()) * spec.means[0] + t @ spec.means[1:]
    return mean, spec.cov.copy()


def oracle_sample(spec: GaussianSpec, tvec, count: int, rng) -> PointCloud:
    mean, cov = gaussian_barycenter_oracle(spec, tvec)
    return sample_shape(ShapeSpec("gaussian", mean=tuple(mean), cov=cov.tolist()), count, rng)


def gaussian_floor(spec: GaussianSpec, tvec, count: int, rng: RngStream, metric: str = "auto") -> float:
    """W2 between two independent oracle draws of the same size."""
    return distance(oracle_sample(spec, tvec, count, rng.child("floor-a")),
                    oracle_sample(spec, tvec, count, rng.child("floor-b")), metric)


def shape_floor(spec: ShapeSpec, count: int, rng: RngStream, metric: str = "auto") -> float:
    return distance(sample_shape(spec, count, rng.child("floor-a")),
                    sample_shape(spec, count, rng.child("floor-b")), metric)


# ---------------------------------------------------------------------------
# Slices and transport cost
# ---------------------------------------------------------------------------


def _carry(field, cloud: PointCloud, start, end, steps: int) -> PointCloud:
    start, end = np.asarray(start, float), np.asarray(end, float)
    if np.array_equal(start, end):
        return cloud
    path = PathSpec(np.stack([start, end]), steps)
    return PointCloud(transport(field, cloud.points, path), cloud.weights)


def slice_barycenter_check(field, marginals: Sequence[PointCloud], tvec, steps: int = DEFAULT_STEPS,
                           metric: str = "auto", model_source: PointCloud | None = None) -> dict:
    """Horizontal and vertical slice barycenters against the model endpoint at (t, s).

    ``marginals`` are clouds for rho_0, rho_1 (end of the t flow) and rho_2
    (end of the s flow). A_s and B_s carry rho_0 and rho_1 along s, C_t and
    D_t carry rho_0 and rho_2 along t; the slice barycenters use weights
    (1 - t, t) and (1 - s, s).
    """
    if field.n != 2 or len(marginals) != 3:
        raise ParameterError("slice barycenters are defined for two-parameter fields and three marginals")
    t, s = (float(v) for v in tvec)
    rho0, rho1, rho2 = marginals
    source = model_source if model_source is not None else rho0
    model = generate(field, source, Diagonal((t, s)), steps)
    A = _carry(field, rho0, (0.0, 0.0), (0.0, s), steps)
    Bs = _carry(field, rho1, (1.0, 0.0), (1.0, s), steps)
    C = _carry(field, rho0, (0.0, 0.0), (t, 0.0), steps)
    D = _carry(field, rho2, (0.0, 1.0), (t, 1.0), steps)
    out = {"tvec": [t, s], "model_mean": model.points.mean(axis=0).tolist()}
    for name, pair, w in (("horizontal", (A, Bs), t), ("vertical", (C, D), s)):
        if 0.0 <= w <= 1.0:
            bary = free_support_barycenter(list(pair), [1.0 - w, w]).support
            out[name] = {"w2": distance(model, bary, metric), "mean": bary.points.mean(axis=0).tolist()}
        else:
            out[name] = {"w2": None, "mean": None}
    return out


def pifm_transport_cost(a, b, c=None, t=None, s=None, tvec=None) -> float:
    """Mean of (1 - sum t) ||z - a||^2 + sum_i t_i ||z - b_i||^2 over aligned tuples.

    z = (1 - sum t) a + sum_i t_i b_i. Called either as (a, b, c, t, s) for two
    targets or as (a, [b_1, ..., b_n], tvec=...).
    """
    a = as_points(a)
    if tvec is None:
        targets = [as_points(b), as_points(c)]
        tv = np.array([t, s], dtype=np.float64)
    else:
        targets = [as_points(x) for x in b]
        tv = np.asarray(tvec, dtype=np.float64).reshape(-1)
    if len(targets) != tv.shape[0]:
        raise ParameterError("one parameter per target is required")
    for x in targets:
        if x.shape != a.shape:
            raise ParameterError("tuples must be aligned and of equal length")
    w0 = 1.0 - tv.sum()
    z = w0 * a + sum(ti * x for ti, x in zip(tv, targets))
    cost = w0 * np.sum((z - a) ** 2, axis=1)
    for ti, x in zip(tv, targets):
        cost = cost + ti * np.sum((z - x) ** 2, axis=1)
    return float(cost.mean())


# ---------------------------------------------------------------------------
# Barycenter agreement grid
# ---------------------------------------------------------------------------


def in_simplex(tvec, tol: float = 1e-12) -> bool:
    t = np.asarray(tvec, dtype=np.float64)
    return bool(np.all(t >= -tol) and t.sum() <= 1.0 + tol)


def is_interior(tvec, tol: float = 1e-12) -> bool:
    t = np.asarray(tvec, dtype=np.float64)
    return bool(np.all(t > tol) and t.sum() < 1.0 - tol)


@dataclass
class BarycenterGridReport:
    oracle: str
    entries: list = field(default_factory=list)

    def entry(self, tvec) -> dict:
        key = [float(v) for v in tvec]
        for e in self.entries:
            if e["tvec"] == key:
                return e
        raise KeyError(tvec)

    def to_dict(self) -> dict:
        return {"oracle": self.oracle, "entries": list(self.entries)}


def _marginal_draw(m, count: int, rng: RngStream) -> PointCloud:
    if isinstance(m, ShapeSpec):
        return sample_shape(m, count, rng)
    return m


def barycenter_compare(field, marginals: Sequence, grid: Sequence, oracle: str = "free-support",
                       count: int = 512, seed: int = 0, steps: int = DEFAULT_STEPS,
                       gaussian: GaussianSpec | None = None, metric: str = "auto",
                       floor: bool = True, tol: float = 1e-6, max_iter: int = 200) -> BarycenterGridReport:
    """Model endpoint (diagonal strategy) against a barycenter oracle on a parameter grid.

    ``marginals`` lists rho_0..rho_n as shape specs (fresh draws per grid
    point, which also yields a resampling floor) or fixed clouds. The model
    starts from its own independent source draw. Inside the simplex the
    free-support oracle applies; outside it, the analytic Gaussian oracle if
    ``gaussian`` is given, otherwise no oracle.
    """
    if oracle not in ("free-support", "analytic-gaussian"):
        raise ParameterError(f"unknown oracle {oracle!r}")
    if oracle == "analytic-gaussian" and gaussian is None:
        raise ParameterError("the analytic oracle needs Gaussian marginals")
    if len(marginals) != field.n + 1:
        raise ParameterError(f"expected {field.n + 1} marginals, got {len(marginals)}")
    report = BarycenterGridReport(oracle)
    root = RngStream(seed, "barycenter-grid")
    for k, tvec in enumerate(grid):
        tvec = tuple(float(v) for v in tvec)
        rng = root.child(f"point-{k}")
        source = _marginal_draw(marginals[0], count, rng.child("model-source"))
        t0 = time.perf_counter()
        endpoint = generate(field, source, Diagonal(tvec), steps)
        model_ms = (time.perf_counter() - t0) * 1e3
        kind = oracle
        if kind == "free-support" and not in_simplex(tvec):
            kind = "analytic-gaussian" if gaussian is not None else "none"
        entry = {"tvec": list(tvec), "oracle": kind, "inside_simplex": in_simplex(tvec),
                 "w2": None, "floor": None, "model_ms": model_ms, "oracle_ms": None,
                 "model_mean": endpoint.points.mean(axis=0).tolist(), "oracle_mean": None}
        if kind == "free-support":
            lam = np.clip(np.concatenate([[1.0 - sum(tvec)], tvec]), 0.0, None)
            lam = lam / lam.sum()
            draws = [_marginal_draw(m, count, rng.child(f"oracle-a-{j}")) for j, m in enumerate(marginals)]
            t0 = time.perf_counter()
            result = free_support_barycenter(draws, lam, tol=tol, max_iter=max_iter)
            entry["oracle_ms"] = (time.perf_counter() - t0) * 1e3
            entry["oracle_iterations"] = result.iterations
            bary = result.support
            if floor and all(isinstance(m, ShapeSpec) for m in marginals):
                again = [sample_shape(m, count, rng.child(f"oracle-b-{j}")) for j, m in enumerate(marginals)]
                entry["floor"] = distance(bary, free_support_barycenter(again, lam, tol=tol,
                                                                        max_iter=max_iter).support, metric)
        elif kind == "analytic-gaussian":
            t0 = time.perf_counter()
            bary = oracle_sample(gaussian, tvec, count, rng.child("oracle"))
            entry["oracle_ms"] = (time.perf_counter() - t0) * 1e3
            if floor:
                entry["floor"] = gaussian_floor(gaussian, tvec, count, rng, metric)
        else:
            report.entries.append(entry)
            continue
        entry["w2"] = distance(endpoint, bary, metric)
        entry["oracle_mean"] = bary.points.mean(axis=0).tolist()
        report.entries.append(entry)
    return report


def strip_timing(obj):
    """Copy of a JSON-like object without wall-time fields (keys ending in ``_ms``)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not (k.endswith("_ms") or k == "wall_times")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


__all__ = [
    "BarycenterGridReport", "CommutativityReport", "GaussianSpec", "barycenter_compare",
    "commutativity_gap", "distance", "gaussian_barycenter_oracle", "gaussian_floor", "in_simplex",
    "is_interior", "oracle_sample", "pifm_transport_cost", "shape_floor", "slice_barycenter_check",
    "strip_timing",
]
