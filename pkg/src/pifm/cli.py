"""Command-line entry point: ``pifm {train,generate,eval,barycenter,scenario}``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analytics import in_simplex
from .errors import CheckpointError, ParameterError, TrainingError
from .geometry import PointCloud, ShapeSpec, load_csv, sample_shape, save_csv
from .inference import all_orders, generate, integrate_path, parse_grid, parse_strategy, strategy_to_path
from .model import load_checkpoint, save_checkpoint
from .plotting import scatter_panels
from .rng import RngStream
from .scenarios import (SCENARIOS, ScenarioSpec, _finite, evaluate, get_scenario, load_config, run_scenario,
                        train_models, write_manifest, write_metrics)
from .training import save_history_csv
from .transport import free_support_barycenter

EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_NONFINITE = 4


def _overrides(args) -> dict:
    out = {}
    for flag, key in (("steps", "steps"), ("lam", "lam"), ("sigma", "sigma"), ("coupling", "coupling")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "grid", None):
        out["grid"] = tuple(parse_grid(args.grid))
    return out


def _spec(args, default: str | None = None) -> ScenarioSpec:
    base = get_scenario(args.scenario) if getattr(args, "scenario", None) else (
        get_scenario(default) if default else None)
    spec = load_config(args.config, base) if getattr(args, "config", None) else base
    if spec is None:
        raise ParameterError("give --config or --scenario")
    return spec.with_overrides(**_overrides(args))


def _parse_point(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _load_source(text: str, count: int, seed: int) -> PointCloud:
    path = Path(text)
    if path.suffix == ".csv" and path.exists():
        return load_csv(path)
    spec = ShapeSpec.from_dict(json.loads(path.read_text() if path.exists() else text))
    return sample_shape(spec, count, RngStream(seed, "cli/source"))


def cmd_train(args) -> int:
    spec = _spec(args)
    seed = spec.config.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    params, history = train_models(spec, seed)
    wall = {"train_s": time.perf_counter() - t0}
    ck, lc = out / "model.ckpt", out / "loss.csv"
    save_checkpoint(params, ck)
    save_history_csv(history, lc)
    write_manifest(out, spec.to_dict(), seed, wall, [ck, lc])
    final = history[-1] if history else None
    print(f"wrote {ck} ({len(history)} steps" + (f", final fm={final.fm:.4g} pi={final.pi:.4g})" if final else ")"))
    return 0


def cmd_generate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cloud = _load_source(args.source, args.count, args.seed)
    if cloud.dim != params.d:
        raise ParameterError(f"source dimension {cloud.dim} does not match checkpoint dimension {params.d}")
    terminal = _parse_point(args.tvec) if args.tvec else (1.0,) * params.n
    if len(terminal) != params.n:
        raise ParameterError(f"--tvec needs {params.n} entries")
    strategies = all_orders(params.n, terminal) if args.all_orders else [
        parse_strategy(args.strategy, terminal, args.int_steps)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    layers = [("source", cloud.points)]
    for strat in strategies:
        tag = strat.label.replace(":", "_").replace(",", "-")
        if args.trajectory:
            traj = integrate_path(params, cloud, strategy_to_path(strat, params.n, args.int_steps))
            traj.export(out / f"trajectory_{tag}", strat.label)
            files += sorted((out / f"trajectory_{tag}").iterdir())
            end = traj.endpoint
        else:
            end = generate(params, cloud, strat, args.int_steps)
        path = out / f"endpoint_{tag}.csv"
        save_csv(end, path)
        files.append(path)
        layers.append((strat.label, end.points))
        if not np.all(np.isfinite(end.points)):
            print(f"non-finite endpoint for {strat.label}", file=sys.stderr)
            return EXIT_NONFINITE
    svg = out / "endpoints.svg"
    scatter_panels([(lab, [layers[0], (lab, pts)]) for lab, pts in layers[1:]], svg)
    files.append(svg)
    write_manifest(out, {"checkpoint": str(args.checkpoint), "source": args.source, "tvec": list(terminal),
                         "strategies": [s.label for s in strategies], "steps": args.int_steps}, args.seed, {}, files)
    print(f"wrote {len(strategies)} endpoint(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    spec = _spec(args)
    spec = replace(spec, eval=replace(spec.eval, baseline=False))
    if params.n != spec.config.n or params.d != spec.source.dim:
        raise ParameterError(f"checkpoint (n={params.n}, d={params.d}) does not match scenario "
                             f"{spec.name} (n={spec.config.n}, d={spec.source.dim})")
    seed = spec.config.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    metrics, _ = evaluate(spec, seed, params)
    metrics["finite"] = _finite(metrics)
    files = write_metrics(metrics, out)
    write_manifest(out, spec.to_dict(), seed, {"eval_s": time.perf_counter() - t0}, files)
    print(f"max gap {metrics['max_gap']:.4g}; wrote {out / 'metrics.json'}")
    return 0 if metrics["finite"] else EXIT_NONFINITE


def cmd_barycenter(args) -> int:
    sources = json.loads(Path(args.marginals).read_text() if Path(args.marginals).exists() else args.marginals)
    marginals = []
    for k, item in enumerate(sources):
        if isinstance(item, str):
            marginals.append(load_csv(item))
        else:
            marginals.append(sample_shape(ShapeSpec.from_dict(item), args.count,
                                          RngStream(args.seed, f"cli/marginal-{k}")))
    if args.lambdas:
        weights = [[float(v) for v in args.lambdas.split(",")]]
    elif args.grid:
        weights = [[1.0 - sum(t), *t] for t in parse_grid(args.grid, len(marginals) - 1)]
    else:
        raise ParameterError("give --lambdas or --grid")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, reports = [], []
    for k, lam in enumerate(weights):
        if not in_simplex(lam[1:]) or min(lam) < -1e-12:
            raise ParameterError(f"weights {lam} lie outside the simplex; the free-support barycenter "
                                 "is only defined for nonnegative weights summing to one")
        lam = [max(v, 0.0) for v in lam]
        res = free_support_barycenter(marginals, lam, tol=args.tol, max_iter=args.max_iter)
        path = out / f"barycenter_{k:03d}.csv"
        save_csv(res.support, path)
        files.append(path)
        reports.append({"lambdas": lam, "file": path.name, **res.report()})
    timing = out / "timing.json"
    timing.write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    files.append(timing)
    write_manifest(out, {"marginals": sources, "weights": weights, "count": args.count}, args.seed, {}, files)
    print(f"wrote {len(reports)} barycenter(s) to {out}")
    return 0


def cmd_scenario(args) -> int:
    spec = get_scenario(args.name)
    if args.config:
        spec = load_config(args.config, spec)
    spec = spec.with_overrides(**_overrides(args))
    result = run_scenario(spec, args.seed, args.out, plots=True)
    m = result.metrics
    print(f"{spec.name}: max gap {m['max_gap']:.4g}, wrote {len(result.files)} files to {args.out}")
    return 0 if m["finite"] else EXIT_NONFINITE


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--coupling", choices=("independent", "ot", "prescribed"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pifm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a multi-head field")
    p.add_argument("--config")
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="integrate a source cloud with a trained field")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="ShapeSpec JSON (inline or file) or a CSV cloud")
    p.add_argument("--strategy", default="diagonal", help="order:<perm>, diagonal or path:<file>")
    p.add_argument("--tvec", help="terminal parameter point, e.g. 1,1")
    p.add_argument("--steps", dest="int_steps", type=int, default=100)
    p.add_argument("--count", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all-orders", action="store_true")
    p.add_argument("--trajectory", action="store_true", help="also export per-step snapshots")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="metric battery for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("barycenter", help="free-support barycenter of point clouds")
    p.add_argument("--marginals", required=True, help="JSON list of ShapeSpecs or CSV paths (inline or file)")
    p.add_argument("--lambdas")
    p.add_argument("--grid")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_barycenter)

    p = sub.add_parser("scenario", help="train, evaluate and plot a named scenario")
    p.add_argument("name", help=", ".join(SCENARIOS))
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid")
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
