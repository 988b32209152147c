"""Optimal transport on small point clouds.

Exact assignment backs minibatch couplings and W2; Sinkhorn is the entropic
alternative for larger problems; the free-support fixed point gives
Wasserstein barycenters of empirical measures.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack
from scipy.special import logsumexp

from .errors import ParameterError
from .geometry import PointCloud, as_points
from .rng import RngStream, as_generator


def squared_cost_matrix(X: PointCloud | np.ndarray, Y: PointCloud | np.ndarray) -> np.ndarray:
    """C[i, j] = ||x_i - y_j||^2, computed from explicit differences (never negative)."""
    x, y = as_points(X), as_points(Y)
    if x.shape[1] != y.shape[1]:
        raise ParameterError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# ---------------------------------------------------------------------------
# Exact assignment
# ---------------------------------------------------------------------------


def _check_square(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ParameterError(f"assignment needs a square cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ParameterError("assignment cost matrix has non-finite entries")
    return cost


def _potentials(cost: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reduced costs of an optimal assignment.

    Column potentials are shortest-path distances in the graph with an edge
    perm[i] -> j of weight cost[i, j] - cost[i, perm[i]]; optimality of
    ``perm`` rules out negative cycles, so Bellman-Ford terminates.
    """
    n = cost.shape[0]
    rows = np.arange(n)
    assigned = cost[rows, perm]
    Q = np.empty_like(cost)
    Q[perm] = cost - assigned[:, None]
    dist = np.zeros(n)
    for _ in range(n + 1):
        new = np.minimum(dist, (dist[:, None] + Q).min(axis=0))
        if np.array_equal(new, dist):
            break
        dist = new
    return cost - assigned[:, None] + dist[perm][:, None] - dist[None, :]


def _lexicographic(cost: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Smallest optimal permutation in lexicographic order, starting from any optimum."""
    n = cost.shape[0]
    reduced = _potentials(cost, perm)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max())) * n
    tight = reduced <= tol
    if int(tight.sum()) == n:
        return perm
    match = perm.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        freed = match[i]
        for j in np.flatnonzero(tight[i, :freed] & ~fixed[:freed]):
            path = _alternating_path(tight, match, owner, fixed, i, int(j), int(freed))
            if path is not None:
                match[i] = j
                owner[j] = i
                for r, c in path:
                    match[r] = c
                    owner[c] = r
                break
        fixed[match[i]] = True
    return match


def _alternating_path(tight, match, owner, fixed, i, j, freed):
    """Re-seat the rows displaced when row ``i`` takes column ``j``.

    Breadth-first search over tight edges from the current owner of ``j``
    until some row can take ``freed``. Returns the (row, new column) moves.
    """
    start = int(owner[j])
    parent = {start: None}
    queue = [start]
    while queue:
        nxt = []
        for r in queue:
            for c in np.flatnonzero(tight[r] & ~fixed):
                c = int(c)
                if c == j or c == match[r]:
                    continue
                if c == freed:
                    moves = [(r, c)]
                    while parent[r] is not None:
                        prev_row, col = parent[r]
                        moves.append((prev_row, col))
                        r = prev_row
                    return moves
                r2 = int(owner[c])
                if r2 == i or r2 in parent:
                    continue
                parent[r2] = (r, c)
                nxt.append(r2)
        queue = nxt
    return None


def solve_assignment(cost: np.ndarray, canonical: bool = True) -> np.ndarray:
    """Minimum-cost permutation: row i is matched to column ``perm[i]``.

    The optimum comes from scipy's Jonker-Volgenant solver. With
    ``canonical`` set, ties are broken towards the lexicographically smallest
    optimal permutation.
    """
    cost = _check_square(cost)
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    _, perm = linear_sum_assignment(cost)
    perm = perm.astype(np.int64)
    return _lexicographic(cost, perm) if canonical else perm


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass
class SinkhornResult:
    plan: np.ndarray
    marginal_error: float
    iterations: int
    converged: bool


def sinkhorn(cost: np.ndarray, src_w, tgt_w, eps: float, max_iter: int = 1000,
             tol: float = 1e-9) -> SinkhornResult:
    """Entropic OT plan via log-domain Sinkhorn iterations.

    ``marginal_error`` is the L1 violation of the row marginals (columns are
    exact after each half-step). Non-convergence is reported, not raised.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    C = np.asarray(cost, dtype=np.float64)
    a = np.asarray(src_w, dtype=np.float64)
    b = np.asarray(tgt_w, dtype=np.float64)
    if C.shape != (a.shape[0], b.shape[0]):
        raise ParameterError(f"cost shape {C.shape} does not match weights {a.shape[0]}x{b.shape[0]}")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ParameterError("marginal weights must sum to 1")
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - C) / eps)
        err = float(np.abs(plan.sum(axis=1) - a).sum())
        if err <= tol:
            break
    plan = np.exp((f[:, None] + g[None, :] - C) / eps)
    return SinkhornResult(plan, err, it, err <= tol)


def exact_plan(cost: np.ndarray, src_w, tgt_w) -> np.ndarray:
    """Exact OT plan. Equal-size uniform problems reduce to an assignment."""
    C = np.asarray(cost, dtype=np.float64)
    a = np.asarray(src_w, dtype=np.float64)
    b = np.asarray(tgt_w, dtype=np.float64)
    n, m = C.shape
    if n == m and np.all(a == a[0]) and np.all(b == b[0]):
        plan = np.zeros((n, m))
        plan[np.arange(n), solve_assignment(C, canonical=False)] = 1.0 / n
        return plan
    rows = np.repeat(np.arange(n), m)
    cols = np.tile(np.arange(m), n)
    idx = np.arange(n * m)
    A_rows = coo_matrix((np.ones(n * m), (rows, idx)), shape=(n, n * m))
    A_cols = coo_matrix((np.ones(n * m), (cols, idx)), shape=(m, n * m))
    res = linprog(C.reshape(-1), A_eq=vstack([A_rows, A_cols]).tocsr(),
                  b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"exact OT linear program failed: {res.message}")
    return np.clip(res.x.reshape(n, m), 0.0, None)


# ---------------------------------------------------------------------------
# Minibatch couplings
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CouplingMode:
    """How a source batch is paired with each target.

    ``kind`` is ``independent``, ``ot`` (each target solved against the
    source separately) or ``prescribed`` (b_i = T_i(a), one map per target).
    Prescribed maps are (matrix, offset) pairs or callables on (B, d) arrays.
    """

    kind: str = "ot"
    maps: tuple = ()

    def __post_init__(self):
        if self.kind not in ("independent", "ot", "prescribed"):
            raise ParameterError(f"unknown coupling {self.kind!r}")
        if self.kind == "prescribed" and not self.maps:
            raise ParameterError("prescribed coupling needs at least one map")

    @classmethod
    def prescribed(cls, maps: Sequence) -> "CouplingMode":
        norm = []
        for m in maps:
            if callable(m):
                norm.append(m)
                continue
            try:
                arr = np.asarray(m, dtype=np.float64)
            except ValueError:
                arr = None
            if arr is not None and (arr.ndim == 0 or (arr.ndim == 2 and arr.shape[0] == arr.shape[1])):
                A, r = arr, None
            else:
                A, r = m
            norm.append((np.asarray(A, dtype=np.float64), None if r is None else np.asarray(r, float)))
        return cls("prescribed", tuple(norm))

    def apply(self, i: int, a: np.ndarray) -> np.ndarray:
        m = self.maps[i]
        if callable(m):
            return np.asarray(m(a), dtype=np.float64)
        A, r = m
        out = a * A if A.ndim == 0 else a @ A.T
        return out if r is None else out + r


@dataclass(frozen=True)
class CoupledTuple:
    a: np.ndarray
    b: tuple[np.ndarray, ...]


@dataclass
class CoupledBatch:
    """Batch of joint samples z = (a, b_1..b_n), stored as arrays.

    ``a`` has shape (B, d) and ``b`` has shape (B, n, d).
    """

    a: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return self.a.shape[0]

    def __getitem__(self, k: int) -> CoupledTuple:
        return CoupledTuple(self.a[k], tuple(self.b[k]))

    def __iter__(self) -> Iterator[CoupledTuple]:
        return (self[k] for k in range(len(self)))


def minibatch_couple(a_batch: PointCloud | np.ndarray, target_batches: Sequence[PointCloud | np.ndarray],
                     mode: CouplingMode, rng: RngStream | np.random.Generator | int | None = None,
                     n_targets: int | None = None) -> CoupledBatch:
    a = as_points(a_batch)
    B, d = a.shape
    if mode.kind == "prescribed":
        n = n_targets or len(mode.maps)
        if len(mode.maps) != n:
            raise ParameterError(f"prescribed coupling has {len(mode.maps)} maps for {n} targets")
        b = np.stack([mode.apply(i, a) for i in range(n)], axis=1)
        return CoupledBatch(a, b)
    targets = [as_points(t) for t in target_batches]
    for t in targets:
        if t.shape != (B, d):
            raise ParameterError(f"target batch shape {t.shape} does not match source {(B, d)}")
    cols = []
    if mode.kind == "independent":
        gen = as_generator(rng, "coupling")
        for t in targets:
            cols.append(t[gen.permutation(B)])
    else:
        # -2<a, b> differs from the squared cost by row and column constants, so the
        # optimum is the same and the solver converges faster on it
        for t in targets:
            cols.append(t[solve_assignment(-2.0 * a @ t.T, canonical=False)])
    return CoupledBatch(a, np.stack(cols, axis=1))


# ---------------------------------------------------------------------------
# Wasserstein-2
# ---------------------------------------------------------------------------


def w2_exact(X: PointCloud | np.ndarray, Y: PointCloud | np.ndarray) -> float:
    """Exact W2 between equal-size uniform clouds via linear assignment."""
    x, y = as_points(X), as_points(Y)
    for c in (X, Y):
        if isinstance(c, PointCloud) and not c.is_uniform:
            raise ParameterError("w2_exact needs uniform weights")
    if x.shape[0] != y.shape[0]:
        raise ParameterError(f"w2_exact needs equal sizes ({x.shape[0]} vs {y.shape[0]}); use sliced_w2")
    C = squared_cost_matrix(x, y)
    perm = solve_assignment(C, canonical=False)
    return float(np.sqrt(max(C[np.arange(len(perm)), perm].mean(), 0.0)))


def _w2_1d_sq(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray) -> float:
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    if xs.shape == ys.shape and np.all(wx == wx[0]) and np.all(wy == wy[0]):
        return float(np.mean((xs - ys) ** 2))
    cx = np.cumsum(wx[ix])
    cy = np.cumsum(wy[iy])
    levels = np.unique(np.concatenate([[0.0], cx, cy]).clip(0.0, 1.0))
    mass = np.diff(levels)
    mid = levels[:-1] + 0.5 * mass
    qx = xs[np.minimum(np.searchsorted(cx, mid), len(xs) - 1)]
    qy = ys[np.minimum(np.searchsorted(cy, mid), len(ys) - 1)]
    return float(np.sum(mass * (qx - qy) ** 2))


def sliced_w2(X: PointCloud | np.ndarray, Y: PointCloud | np.ndarray, n_projections: int = 256,
              rng: RngStream | np.random.Generator | int | None = None) -> float:
    """Root-mean over random unit directions of squared 1-D W2 distances."""
    if n_projections < 1:
        raise ParameterError("n_projections must be >= 1")
    x, y = as_points(X), as_points(Y)
    if x.shape[1] != y.shape[1]:
        raise ParameterError("dimension mismatch")
    wx = X.weights if isinstance(X, PointCloud) else np.full(len(x), 1.0 / len(x))
    wy = Y.weights if isinstance(Y, PointCloud) else np.full(len(y), 1.0 / len(y))
    gen = as_generator(rng, "projections")
    theta = gen.standard_normal((n_projections, x.shape[1]))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    px, py = x @ theta.T, y @ theta.T
    total = sum(_w2_1d_sq(px[:, k], wx, py[:, k], wy) for k in range(n_projections))
    return float(np.sqrt(total / n_projections))


# ---------------------------------------------------------------------------
# Free-support barycenter
# ---------------------------------------------------------------------------


@dataclass
class BarycenterResult:
    support: PointCloud
    iterations: int
    final_movement: float
    wall_time_ms: float
    objective: list[float] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_movement": self.final_movement,
            "wall_time_ms": self.wall_time_ms,
        }


def _check_simplex(lambdas: Sequence[float], k: int) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lam.shape[0] != k:
        raise ParameterError(f"{lam.shape[0]} weights for {k} marginals")
    if np.any(lam < 0):
        raise ParameterError(
            f"barycenter weights must be nonnegative, got {lam.tolist()}; "
            "the free-support oracle is only defined inside the simplex"
        )
    if abs(lam.sum() - 1.0) > 1e-9:
        raise ParameterError(f"barycenter weights must sum to 1, got {lam.sum()}")
    return lam


def free_support_barycenter(marginals: Sequence[PointCloud], lambdas: Sequence[float],
                            support_size: int | None = None,
                            init: PointCloud | RngStream | int | None = None,
                            tol: float = 1e-6, max_iter: int = 200) -> BarycenterResult:
    """Fixed-point iteration for the Wasserstein barycenter with a free uniform support.

    Each sweep solves exact OT from the current support to every marginal and
    moves each support point to the weighted average of its barycentric
    projections. Marginals with zero weight are dropped up front.
    """
    if len(marginals) < 1:
        raise ParameterError("need at least one marginal")
    lam = _check_simplex(lambdas, len(marginals))
    keep = [j for j in range(len(marginals)) if lam[j] > 0]
    margs = [marginals[j] for j in keep]
    lam = lam[keep]
    first = margs[0]
    if support_size is None:
        support_size = first.size
    start = time.perf_counter()
    if isinstance(init, PointCloud):
        X = init.points.copy()
    elif init is None and support_size == first.size:
        X = first.points.copy()
    elif init is None:
        X = first.points[np.linspace(0, first.size - 1, support_size).round().astype(int)].copy()
    else:
        gen = as_generator(init, "barycenter-init")
        X = first.points[gen.choice(first.size, support_size, replace=support_size > first.size)].copy()
    M = X.shape[0]
    w = np.full(M, 1.0 / M)
    objective: list[float] = []
    movement = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        X_new = np.zeros_like(X)
        J = 0.0
        for lj, marg in zip(lam, margs):
            C = squared_cost_matrix(X, marg.points)
            plan = exact_plan(C, w, marg.weights)
            J += lj * float(np.sum(plan * C))
            X_new += lj * (plan @ marg.points) / w[:, None]
        objective.append(J)
        movement = float(np.linalg.norm(X_new - X, axis=1).mean())
        X = X_new
        if movement < tol:
            break
    elapsed = (time.perf_counter() - start) * 1e3
    return BarycenterResult(PointCloud.uniform(X), it, movement, elapsed, objective)


def barycenter_objective(support: PointCloud, marginals: Sequence[PointCloud], lambdas) -> float:
    """Sum_j lambda_j W2^2(support, marginal_j) with exact plans."""
    lam = _check_simplex(lambdas, len(marginals))
    total = 0.0
    for lj, marg in zip(lam, marginals):
        if lj == 0:
            continue
        C = squared_cost_matrix(support.points, marg.points)
        total += lj * float(np.sum(exact_plan(C, support.weights, marg.weights) * C))
    return total
