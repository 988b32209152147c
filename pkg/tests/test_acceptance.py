"""End-to-end acceptance checks, one test per criterion.

The scenario fixtures train at full size (several minutes each on one core)
and are shared across criteria. Every test records a single PASS/FAIL line,
printed immediately and again in the pytest terminal summary.
"""
from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, brute_force_assignment
from pifm.analytics import is_interior, shape_floor, strip_timing
from pifm.geometry import PointCloud, gaussian, sample_shape
from pifm.inference import PathSpec, transport
from pifm.model import AnalyticField, LinearHead, forward, init_params, jvp, lie_residual
from pifm.rng import RngStream
from pifm.scenarios import get_scenario, run_scenario
from pifm.training import TrainBatch, pifm_loss, sample_conditional_x
from pifm.transport import CoupledBatch, barycenter_objective, free_support_barycenter, solve_assignment

pytestmark = pytest.mark.slow


def record(key: str, ok: bool, detail: str) -> None:
    line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def check(key: str, ok: bool, detail: str) -> None:
    record(key, ok, detail)
    assert ok, detail


@pytest.fixture(scope="module")
def gaussian_run():
    return run_scenario(get_scenario("gaussian-oracle"), seed=0)


@pytest.fixture(scope="module")
def fig1_run():
    return run_scenario(get_scenario("fig1-multimarginal"), seed=0)


# ---------------------------------------------------------------------------
# C1: unit-level oracles, no training
# ---------------------------------------------------------------------------


def _fd_rel(exact, approx):
    exact, approx = np.ravel(exact), np.ravel(approx)
    return np.linalg.norm(exact - approx) / max(np.linalg.norm(approx), 1e-8)


def test_c1_unit_oracles():
    start = time.perf_counter()
    gen = np.random.default_rng(2024)
    failures = []

    for _ in range(500):
        N = int(gen.integers(1, 9))
        C = gen.random((N, N))
        best, lex = brute_force_assignment(C)
        perm = solve_assignment(C)
        if abs(C[np.arange(N), perm].sum() - best) > 1e-9 or tuple(perm.tolist()) != lex:
            failures.append("assignment")
            break

    worst_jvp = 0.0
    for k in range(50):
        p = init_params(2, 2, 16, 2, RngStream(k), head_hidden=k % 2)
        x, t, dx, dt = gen.standard_normal(2), gen.random(2), gen.standard_normal(2), gen.standard_normal(2)
        h = 1e-4
        fd = (forward(p, x + h * dx, t + h * dt) - forward(p, x - h * dx, t - h * dt)) / (2 * h)
        worst_jvp = max(worst_jvp, _fd_rel(jvp(p, x, t, dx, dt), fd))
    if worst_jvp > 1e-4:
        failures.append(f"jvp {worst_jvp:.2e}")

    worst_grad = 0.0
    for lam in (0.0, 1.0):
        p = init_params(2, 2, 8, 2, RngStream(7))
        z = CoupledBatch(gen.standard_normal((8, 2)), gen.standard_normal((8, 2, 2)))
        t = gen.random((8, 2))
        batch = TrainBatch.from_coupled(z, t, sample_conditional_x(z, t, 0.1, gen))
        _, grad = pifm_loss(p, batch, lam)
        idx = gen.choice(p.size, 20, replace=False)
        fd = []
        for i in idx:
            plus, minus = p.copy(), p.copy()
            plus.theta[i] += 1e-5
            minus.theta[i] -= 1e-5
            fd.append((pifm_loss(plus, batch, lam, False)[0].total - pifm_loss(minus, batch, lam, False)[0].total) / 2e-5)
        worst_grad = max(worst_grad, _fd_rel(grad[idx], np.array(fd)))
    if worst_grad > 1e-4:
        failures.append(f"loss gradient {worst_grad:.2e}")

    const = AnalyticField.constant(gen.standard_normal((2, 2)))
    lie = np.abs(lie_residual(const, gen.standard_normal((16, 2)), gen.random(2), 0, 1)).max()
    if lie != 0.0:
        failures.append(f"constant lie residual {lie}")

    cloud = gen.standard_normal((32, 2))
    w = gen.standard_normal((1, 2))
    euler = np.abs(transport(AnalyticField.constant(w), cloud, PathSpec([[0.0], [1.0]], 37)) - (cloud + w)).max()
    if euler > 1e-12:
        failures.append(f"euler on constants {euler}")

    lin = AnalyticField([LinearHead(np.eye(1))])
    errs = [abs(transport(lin, np.ones((1, 1)), PathSpec([[0.0], [1.0]], K))[0, 0] - math.e) for K in (16, 32, 64, 128, 256)]
    ratios = [errs[k] / errs[k + 1] for k in range(4)]
    if not all(1.7 <= r <= 2.3 for r in ratios):
        failures.append(f"convergence ratios {ratios}")

    elapsed = time.perf_counter() - start
    if elapsed >= 120:
        failures.append(f"runtime {elapsed:.0f}s")
    check("C1", not failures, f"jvp rel {worst_jvp:.1e}, grad rel {worst_grad:.1e}, "
          f"ratios {min(ratios):.2f}-{max(ratios):.2f}, {elapsed:.1f}s" + (f"; failed {failures}" if failures else ""))


# ---------------------------------------------------------------------------
# C2: analytic Gaussian oracle on the full grid
# ---------------------------------------------------------------------------


def test_c2_gaussian_oracle(gaussian_run):
    m = gaussian_run.metrics
    entries = m["barycenter"]["entries"]
    scale = 4.0  # ||m_1 - m_0||
    worst = []
    for e in entries:
        bound = max(3 * e["floor"], 0.12 * scale * max(1.0, sum(abs(v) for v in e["tvec"])))
        worst.append((e["w2"] / bound, e["tvec"], e["w2"], bound))
    ratio, tvec, w2, bound = max(worst)
    runtime = gaussian_run.wall_times["train_s"] + gaussian_run.wall_times["eval_s"]
    ok = len(entries) == 17 and ratio <= 1.0 and runtime < 600
    check("C2", ok, f"{len(entries)} grid points, worst W2/bound {ratio:.2f} at {tvec} "
          f"(W2 {w2:.3f} <= {bound:.3f}); train+eval {runtime:.0f}s")


# ---------------------------------------------------------------------------
# C3: commutativity at (1, 1), PiFM against composed single-parameter flows
# ---------------------------------------------------------------------------


def test_c3_commutativity(gaussian_run, fig1_run):
    lines, ok = [], True
    g = gaussian_run.metrics
    g_bound = max(3 * g["sampling_floor"], 0.15 * 4.0)
    ok &= g["max_gap"] <= g_bound and g["max_gap"] <= g["baseline"]["max_gap"]
    lines.append(f"gaussian gap {g['max_gap']:.3f} (bound {g_bound:.2f}, CFM {g['baseline']['max_gap']:.3f})")

    f = fig1_run.metrics
    spec = fig1_run.spec
    floor = shape_floor(spec.source, spec.eval.count, RngStream(0, "acceptance/fig1-floor"))
    f_bound = max(3 * floor, 0.15 * 5.0)
    ok &= f["max_gap"] <= f_bound and f["max_gap"] <= f["baseline"]["max_gap"]
    lines.append(f"fig1 gap {f['max_gap']:.3f} (bound {f_bound:.2f}, CFM {f['baseline']['max_gap']:.3f})")
    check("C3", bool(ok), "; ".join(lines))


# ---------------------------------------------------------------------------
# C4: free-support barycenter agreement inside the simplex
# ---------------------------------------------------------------------------


def test_c4_barycenter_agreement(fig1_run):
    entries = [e for e in fig1_run.metrics["barycenter"]["entries"] if is_interior(e["tvec"])]
    results = [(e["tvec"], e["w2"], max(3 * e["floor"], 0.15 * 5.0)) for e in entries]
    ok = bool(entries) and all(w2 <= bound for _, w2, bound in results)
    check("C4", ok, ", ".join(f"{tuple(t)}: {w2:.3f} <= {b:.2f}" for t, w2, b in results))


# ---------------------------------------------------------------------------
# C5: the regularizer on a non-affine path
# ---------------------------------------------------------------------------


def test_c5_curly_regularizer():
    spec = get_scenario("curly")
    runs = {}
    for lam in (0.0, 1.0):
        t0 = time.perf_counter()
        res = run_scenario(spec.with_overrides(lam=lam), seed=0, plots=False)
        runs[lam] = (res.metrics, time.perf_counter() - t0)
    m0, m1 = runs[0.0][0], runs[1.0][0]
    target0, target1 = max(m0["target_w2"].values()), max(m1["target_w2"].values())
    ok = target1 < target0 and m1["max_gap"] < m0["max_gap"] and max(r[1] for r in runs.values()) < 600
    check("C5", ok, f"max W2 to target {target1:.3f} (lambda=1) vs {target0:.3f} (lambda=0); "
          f"max gap {m1['max_gap']:.3f} vs {m0['max_gap']:.3f}; floor {m1['sampling_floor']:.3f}; "
          f"runs {runs[0.0][1]:.0f}s / {runs[1.0][1]:.0f}s")


# ---------------------------------------------------------------------------
# C6: held-out source between the training sources
# ---------------------------------------------------------------------------


def test_c6_domain_shift():
    t0 = time.perf_counter()
    res = run_scenario(get_scenario("domain-shift"), seed=0, plots=False)
    elapsed = time.perf_counter() - t0
    u = res.metrics["unseen"]
    ok = len(u["per_seed"]) == 10 and u["mean"] <= 0.5 and elapsed < 1200
    check("C6", ok, f"W2 {u['mean']:.3f} +/- {u['std']:.3f} over {len(u['per_seed'])} seeds "
          f"(floor {u['floor']:.3f}); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# C7: free-support oracle self-tests
# ---------------------------------------------------------------------------


def test_c7_free_support_self_tests():
    start = time.perf_counter()
    notes = []
    single = sample_shape(gaussian((1, -1), 1.0), 128, RngStream(0))
    res = free_support_barycenter([single], [1.0])
    fixed = np.abs(np.sort(res.support.points, axis=0) - np.sort(single.points, axis=0)).max()
    notes.append(fixed <= 1e-9)

    mid = free_support_barycenter([PointCloud.uniform([[0.0, 0.0]]), PointCloud.uniform([[2.0, 0.0]])], [0.5, 0.5])
    notes.append(np.array_equal(mid.support.points, [[1.0, 0.0]]))

    means = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    margs = [sample_shape(gaussian(m, 0.25), 512, RngStream(1).child(f"m{k}")) for k, m in enumerate(means)]
    lam = np.array([0.25, 0.25, 0.5])
    g = free_support_barycenter(margs, lam)
    mean_err = np.linalg.norm(g.support.points.mean(axis=0) - lam @ means)
    notes.append(mean_err <= 0.1)

    obj = free_support_barycenter(margs, [0.2, 0.3, 0.5], tol=1e-12, max_iter=30).objective
    notes.append(bool(np.all(np.diff(obj) <= 1e-9)))
    notes.append(barycenter_objective(g.support, margs, lam) >= 0)
    elapsed = time.perf_counter() - start
    ok = all(notes) and elapsed < 60
    check("C7", ok, f"fixed point {fixed:.1e}, midpoint exact {notes[1]}, Gaussian mean error {mean_err:.3f}, "
          f"objective non-increasing {notes[3]}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# C8: reproducibility of the metric report
# ---------------------------------------------------------------------------


def test_c8_reproducible_metrics(tmp_path):
    spec = get_scenario("gaussian-oracle").with_overrides(steps=40, count=128, grid=((0.25, 0.25), (1.0, 1.0)))
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_scenario(spec, seed=3, out=out, plots=False)
        metrics = json.loads((out / "metrics.json").read_text())
        blobs.append(json.dumps(strip_timing(metrics), sort_keys=True).encode())
    checkpoints_equal = (tmp_path / "run0" / "model.ckpt").read_bytes() == (tmp_path / "run1" / "model.ckpt").read_bytes()
    ok = blobs[0] == blobs[1] and checkpoints_equal
    check("C8", ok, f"metric JSON identical after dropping wall times ({len(blobs[0])} bytes), "
          f"checkpoints identical {checkpoints_equal}")


# ---------------------------------------------------------------------------
# C9: timing fields
# ---------------------------------------------------------------------------


def test_c9_timing_report(gaussian_run, fig1_run):
    rows = []
    for run in (gaussian_run, fig1_run):
        for e in run.metrics["barycenter"]["entries"]:
            if e["oracle"] != "none":
                rows.append((e["model_ms"], e["oracle_ms"]))
    ok = bool(rows) and all(a is not None and b is not None and a > 0 and b > 0 for a, b in rows)
    fs = [(a, b) for a, b in ((e["model_ms"], e["oracle_ms"]) for e in fig1_run.metrics["barycenter"]["entries"])]
    check("C9", ok, f"{len(rows)} grid points with positive model and oracle times; fig1 median "
          f"model {np.median([a for a, _ in fs]):.0f} ms vs free-support {np.median([b for _, b in fs]):.0f} ms")
