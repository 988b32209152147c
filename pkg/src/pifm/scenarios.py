"""Named experiment setups, the key-value config format and the end-to-end pipeline.

Config files are INI-style with four sections. Values in ``[data]`` are JSON::

    [data]
    scenario = gaussian-oracle          ; optional starting point
    source = {"kind": "disc", "center": [0, 0], "radius": 1}
    targets = [{"kind": "square", "center": [5, 0], "radius": 1}, ...]
    maps = [[[-1, 0], [0, -1]], [[3, 0], [0, 3]]]

    [model]
    width = 64
    depth = 3
    activation = silu

    [train]
    steps = 4000
    lam = 0.0
    coupling = ot

    [eval]
    count = 1024
    grid = simplex:0.25+1,1;1.2,0.3

Unknown sections or keys are rejected with the full list of offenders.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analytics import (GaussianSpec, barycenter_compare, commutativity_gap, distance, gaussian_floor,
                        is_interior, oracle_sample, shape_floor)
from .errors import ParameterError
from .geometry import PointCloud, ShapeSpec, disc, gaussian, moons, sample_shape, save_csv, spiral, square
from .inference import DEFAULT_STEPS, Diagonal, PathSpec, generate, parse_grid, simplex_grid, transport
from .model import ComposedField, ModelParams, save_checkpoint
from .plotting import scatter_panels
from .rng import RngStream
from .training import TrainConfig, save_history_csv, train, train_cfm

MODEL_KEYS = ("width", "depth", "activation", "head_hidden", "fourier")
TRAIN_KEYS = tuple(k for k in TrainConfig.keys() if k not in MODEL_KEYS)
DATA_KEYS = ("scenario", "source", "targets", "maps")

FIG1_INTERIOR = [(0.25, 0.25), (0.25, 0.5), (0.5, 0.25)]
EXTERIOR = [(1.0, 1.0), (1.2, 0.3)]


@dataclass(frozen=True)
class EvalSpec:
    count: int = 1024
    steps: int = DEFAULT_STEPS
    terminal: tuple = (1.0, 1.0)
    grid: tuple = ()
    oracle: str = "none"  # none | free-support | analytic-gaussian
    bary_count: int = 512
    gaussian: dict | None = None  # {"means": [...], "cov": ...}
    reference: dict | None = None  # ShapeSpec dict of the expected distribution at the terminal point
    baseline: bool = False  # train the composition of single-parameter flows
    seeds: int = 1
    unseen: dict | None = None  # ShapeSpec dict of a held-out source
    unseen_reference: dict | None = None  # expected distribution after carrying the held-out source
    unseen_start: tuple | None = None
    unseen_end: tuple | None = None
    metric: str = "auto"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def gaussian_spec(self) -> GaussianSpec | None:
        return None if self.gaussian is None else GaussianSpec(self.gaussian["means"], self.gaussian["cov"])


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    name: str
    config: TrainConfig
    source: ShapeSpec
    targets: tuple = ()
    maps: tuple | None = None
    eval: EvalSpec = field(default_factory=EvalSpec)

    def with_overrides(self, **overrides) -> "ScenarioSpec":
        """Replace TrainConfig or EvalSpec fields by name."""
        train_kw = {k: v for k, v in overrides.items() if k in TrainConfig.keys()}
        eval_kw = {k: v for k, v in overrides.items() if k in EvalSpec.keys()}
        unknown = sorted(set(overrides) - set(train_kw) - set(eval_kw))
        if unknown:
            raise ParameterError(f"unknown override keys: {', '.join(unknown)}")
        return replace(self, config=replace(self.config, **train_kw), eval=replace(self.eval, **eval_kw))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "source": self.source.to_dict(),
            "targets": [t.to_dict() for t in self.targets],
            "maps": None if self.maps is None else [np.asarray(m).tolist() for m in self.maps],
            "eval": asdict(self.eval),
        }


def _gauss_dict(means, cov) -> dict:
    return {"means": [list(map(float, m)) for m in means], "cov": cov}


def _gaussian_oracle() -> ScenarioSpec:
    means = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]
    spec = GaussianSpec(means, 0.25)
    return ScenarioSpec(
        "gaussian-oracle",
        TrainConfig(n=2, steps=4000, batch_size=256, lam=0.0, coupling="ot", sigma=0.05),
        spec.shape(0), tuple(spec.shapes()[1:]),
        eval=EvalSpec(count=1024, grid=tuple(simplex_grid(0.25) + EXTERIOR), oracle="analytic-gaussian",
                      gaussian=_gauss_dict(means, 0.25), baseline=True),
    )


def _fig1(name: str = "fig1-multimarginal") -> ScenarioSpec:
    grid = tuple(FIG1_INTERIOR) if name == "fig1-multimarginal" else tuple(simplex_grid(0.25) + EXTERIOR)
    return ScenarioSpec(
        name,
        TrainConfig(n=2, steps=4000, batch_size=256, lam=0.0, coupling="ot", sigma=0.05),
        disc((0, 0), 1.0), (square((5, 0), 1.0), disc((0, 5), 0.5)),
        eval=EvalSpec(count=1024, grid=grid, oracle="free-support", bary_count=512,
                      baseline=name == "fig1-multimarginal"),
    )


def _domain_shift() -> ScenarioSpec:
    return ScenarioSpec(
        "domain-shift",
        TrainConfig(n=2, steps=1500, batch_size=256, lam=0.0, coupling="ot", sigma=0.05),
        disc((0, 0), 1.0), (disc((5, 0), 0.5), disc((0, 5), 1.0)),
        eval=EvalSpec(count=512, reference=disc((5, 5), 0.5).to_dict(), seeds=10,
                      unseen=disc((0, 2.5), 1.0).to_dict(), unseen_reference=disc((5, 2.5), 0.5).to_dict(),
                      unseen_start=(0.0, 0.5), unseen_end=(1.0, 0.5)),
    )


def _curly() -> ScenarioSpec:
    return ScenarioSpec(
        "curly",
        TrainConfig(n=2, steps=3000, batch_size=256, lam=1.0, coupling="prescribed", sigma=0.05,
                    path="rotation-scaling", path_angle=math.pi, path_scale=3.0),
        gaussian((0, 0), 1.0), (),
        maps=(((-1.0, 0.0), (0.0, -1.0)), ((3.0, 0.0), (0.0, 3.0))),
        eval=EvalSpec(count=1024, reference=gaussian((0, 0), 9.0).to_dict()),
    )


def _appendix_shapes() -> ScenarioSpec:
    return ScenarioSpec(
        "appendix-shapes",
        TrainConfig(n=2, steps=3000, batch_size=256, lam=0.0, coupling="ot", sigma=0.05),
        disc((0, 0), 1.0), (spiral((5, 0), 1.0), moons((0, 5), 1.0)),
        eval=EvalSpec(count=1024),
    )


SCENARIOS = {
    "fig1-multimarginal": lambda: _fig1("fig1-multimarginal"),
    "gaussian-oracle": _gaussian_oracle,
    "barycenter-grid": lambda: _fig1("barycenter-grid"),
    "domain-shift": _domain_shift,
    "curly": _curly,
    "appendix-shapes": _appendix_shapes,
}


def get_scenario(name: str) -> ScenarioSpec:
    if name not in SCENARIOS:
        raise ParameterError(f"unknown scenario {name!r}; available: {', '.join(SCENARIOS)}")
    return SCENARIOS[name]()


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _coerce(kind: type, raw: str, key: str):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind in (int, float):
            return kind(raw)
        if kind is str:
            return raw.strip()
        return json.loads(raw)
    except ValueError as exc:
        raise ParameterError(f"bad value for {key!r}: {raw!r}") from exc


_TRAIN_TYPES = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}
_EVAL_TYPES = {"count": int, "steps": int, "bary_count": int, "seeds": int, "oracle": str, "metric": str,
               "baseline": bool}


def load_config(path: str | Path, base: ScenarioSpec | None = None) -> ScenarioSpec:
    """Build a scenario from a config file, on top of ``base`` or the file's ``scenario`` key."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    if not parser.read(path):
        raise ParameterError(f"cannot read config file {path}")
    allowed = {"data": DATA_KEYS, "model": MODEL_KEYS, "train": TRAIN_KEYS, "eval": tuple(EvalSpec.keys())}
    unknown = [s for s in parser.sections() if s not in allowed]
    for section in parser.sections():
        if section in allowed:
            unknown += [f"{section}.{k}" for k in parser[section] if k not in allowed[section]]
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    data = parser["data"] if parser.has_section("data") else {}
    if "scenario" in data:
        spec = get_scenario(data["scenario"].strip())
    elif base is not None:
        spec = base
    else:
        if "source" not in data:
            raise ParameterError("config needs [data] scenario or source")
        spec = ScenarioSpec("custom", TrainConfig(), ShapeSpec.from_dict(json.loads(data["source"])))
    if "source" in data:
        spec = replace(spec, source=ShapeSpec.from_dict(json.loads(data["source"])))
    if "targets" in data:
        spec = replace(spec, targets=tuple(ShapeSpec.from_dict(t) for t in json.loads(data["targets"])))
    if "maps" in data:
        spec = replace(spec, maps=tuple(json.loads(data["maps"])))
    overrides: dict[str, Any] = {}
    for section in ("model", "train"):
        if parser.has_section(section):
            for key, raw in parser[section].items():
                overrides[key] = _coerce(_TRAIN_TYPES[key], raw, key)
    if parser.has_section("eval"):
        for key, raw in parser["eval"].items():
            if key == "grid":
                overrides[key] = tuple(parse_grid(raw))
            elif key in ("terminal", "unseen_start", "unseen_end"):
                overrides[key] = tuple(float(v) for v in raw.split(","))
            else:
                overrides[key] = _coerce(_EVAL_TYPES.get(key, dict), raw, key)
    spec = spec.with_overrides(**overrides)
    if spec.config.coupling != "prescribed" and len(spec.targets) != spec.config.n:
        spec = replace(spec, config=replace(spec.config, n=len(spec.targets)))
    return spec


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    seed: int
    metrics: dict
    models: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    baseline: ComposedField | None = None
    wall_times: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def train_models(spec: ScenarioSpec, seed: int) -> tuple[ModelParams, list]:
    cfg = replace(spec.config, seed=seed)
    return train(cfg, spec.source, list(spec.targets), maps=spec.maps)


def train_baseline(spec: ScenarioSpec, seed: int) -> ComposedField:
    """Independently trained single-parameter flows from the source to each target."""
    models = []
    for k, target in enumerate(spec.targets):
        params, _ = train_cfm(replace(spec.config, seed=seed + 1000 * (k + 1)), spec.source, target)
        models.append(params)
    return ComposedField(models)


def _reference(spec: ScenarioSpec, tvec, count: int, rng: RngStream):
    """Expected distribution at ``tvec`` when one is known, with its sampling floor."""
    g = spec.eval.gaussian_spec()
    if g is not None:
        return (oracle_sample(g, tvec, count, rng.child("reference")),
                gaussian_floor(g, tvec, count, rng, spec.eval.metric))
    if spec.eval.reference is not None and tuple(tvec) == tuple(spec.eval.terminal):
        ref = ShapeSpec.from_dict(spec.eval.reference)
        return sample_shape(ref, count, rng.child("reference")), shape_floor(ref, count, rng, spec.eval.metric)
    return None, None


def _finite(obj) -> bool:
    if isinstance(obj, dict):
        return all(_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_finite(v) for v in obj)
    if isinstance(obj, float):
        return math.isfinite(obj)
    return True


def evaluate(spec: ScenarioSpec, seed: int, model: ModelParams, baseline=None, extra_models=()) -> tuple[dict, dict]:
    """Metric battery for one trained model. Returns (metrics, clouds for plotting)."""
    ev = spec.eval
    rng = RngStream(seed, f"eval/{spec.name}")
    source = sample_shape(spec.source, ev.count, rng.child("source"))
    terminal = tuple(float(v) for v in ev.terminal)
    reference, floor = _reference(spec, terminal, ev.count, rng)
    report = commutativity_gap(model, source, terminal, ev.steps, ev.metric, reference)
    metrics: dict[str, Any] = {
        "scenario": spec.name,
        "seed": seed,
        "terminal": list(terminal),
        "gaps": report.gaps,
        "max_gap": report.max_gap,
        "target_w2": report.target_w2,
        "sampling_floor": floor,
        "coupling": spec.config.coupling,
        "lambda": spec.config.lam,
    }
    clouds = {"source": source.points, **{f"model {k}": v.points for k, v in report.endpoints.items()}}
    if reference is not None:
        clouds["reference"] = reference.points
    vertex = {}
    for k, target in enumerate(spec.targets):
        e = np.zeros(model.n)
        e[k] = 1.0
        tgt = sample_shape(target, ev.count, rng.child(f"target-{k}"))
        clouds[f"target {k + 1}"] = tgt.points
        vertex[f"e{k + 1}"] = distance(generate(model, source, Diagonal(tuple(e)), ev.steps), tgt, ev.metric)
    metrics["vertex_w2"] = vertex
    if spec.targets:
        metrics["vertex_floor"] = {f"e{k + 1}": shape_floor(t, ev.count, rng.child(f"vertex-floor-{k}"), ev.metric)
                                   for k, t in enumerate(spec.targets)}
    if baseline is not None:
        base = commutativity_gap(baseline, source, terminal, ev.steps, ev.metric, reference)
        metrics["baseline"] = {"gaps": base.gaps, "max_gap": base.max_gap, "target_w2": base.target_w2}
        clouds.update({f"composed {k}": v.points for k, v in base.endpoints.items()})
    if ev.oracle != "none" and ev.grid:
        marg = [spec.source, *spec.targets]
        if ev.oracle == "analytic-gaussian":
            grid_rep = barycenter_compare(model, marg, ev.grid, "analytic-gaussian", ev.count, seed, ev.steps,
                                          ev.gaussian_spec(), ev.metric)
        else:
            grid_rep = barycenter_compare(model, marg, ev.grid, "free-support", ev.bary_count, seed, ev.steps,
                                          ev.gaussian_spec(), ev.metric)
        metrics["barycenter"] = grid_rep.to_dict()
    if ev.unseen is not None:
        per_seed = [_unseen_w2(spec, seed, m) for m in [model, *extra_models]]
        metrics["unseen"] = {
            "per_seed": per_seed,
            "seeds": [seed + k for k in range(len(per_seed))],
            "mean": float(np.mean(per_seed)),
            "std": float(np.std(per_seed)),
        }
        ref = ShapeSpec.from_dict(ev.unseen_reference)
        metrics["unseen"]["floor"] = shape_floor(ref, ev.count, rng.child("unseen-floor"), ev.metric)
    return metrics, clouds


def _unseen_w2(spec: ScenarioSpec, seed: int, model: ModelParams) -> float:
    ev = spec.eval
    rng = RngStream(seed, f"eval/{spec.name}/unseen")
    unseen = sample_shape(ShapeSpec.from_dict(ev.unseen), ev.count, rng.child("source"))
    path = PathSpec(np.array([ev.unseen_start, ev.unseen_end], dtype=np.float64), ev.steps)
    out = transport(model, unseen.points, path)
    ref = sample_shape(ShapeSpec.from_dict(ev.unseen_reference), ev.count, rng.child("reference"))
    return distance(out, ref, ev.metric)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _flatten(prefix: str, obj, rows: list) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, list) and obj and isinstance(obj[0], (dict, list)):
        for k, v in enumerate(obj):
            _flatten(f"{prefix}[{k}]", v, rows)
    else:
        rows.append((prefix, json.dumps(obj)))


def write_metrics(metrics: dict, out: Path) -> list[Path]:
    js = out / "metrics.json"
    js.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    rows: list = []
    _flatten("", metrics, rows)
    cs = out / "metrics.csv"
    with open(cs, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(rows)
    return [js, cs]


def write_manifest(out: Path, config: dict, seed: int, wall_times: dict, files: list[Path]) -> Path:
    manifest = {
        "config": config,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_times": wall_times,
        "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run_scenario(spec: ScenarioSpec, seed: int | None = None, out: str | Path | None = None,
                 plots: bool = True) -> ScenarioResult:
    """Train, evaluate and (when ``out`` is given) write every artifact."""
    seed = spec.config.seed if seed is None else int(seed)
    wall: dict[str, float] = {}
    t0 = time.perf_counter()
    models, histories = [], []
    for k in range(max(1, spec.eval.seeds)):
        params, hist = train_models(spec, seed + k)
        models.append(params)
        histories.append(hist)
    wall["train_s"] = time.perf_counter() - t0
    baseline = None
    if spec.eval.baseline:
        t0 = time.perf_counter()
        baseline = train_baseline(spec, seed)
        wall["baseline_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    metrics, clouds = evaluate(spec, seed, models[0], baseline, models[1:])
    wall["eval_s"] = time.perf_counter() - t0
    metrics["finite"] = _finite(metrics)
    result = ScenarioResult(spec, seed, metrics, models, histories, baseline, wall)
    if out is None:
        return result
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    for k, (params, hist) in enumerate(zip(models, histories)):
        suffix = "" if len(models) == 1 else f"_seed{seed + k}"
        ck = out / f"model{suffix}.ckpt"
        save_checkpoint(params, ck)
        lc = out / f"loss{suffix}.csv"
        save_history_csv(hist, lc)
        files += [ck, lc]
    if baseline is not None:
        for k, m in enumerate(baseline.models):
            ck = out / f"baseline_{k + 1}.ckpt"
            save_checkpoint(m, ck)
            files.append(ck)
    files += write_metrics(metrics, out)
    if plots:
        files += _plots(clouds, out)
    wall["total_s"] = sum(wall.values())
    files.append(write_manifest(out, spec.to_dict(), seed, wall, files))
    result.files = files
    return result


def _plots(clouds: dict, out: Path) -> list[Path]:
    base = [(k, v) for k, v in clouds.items() if k == "source" or k.startswith("target") or k == "reference"]
    panels = [(k, base + [(k, v)]) for k, v in clouds.items() if k.startswith("model ")]
    panels += [(k, base + [(k, v)]) for k, v in clouds.items() if k.startswith("composed ")]
    if not panels:
        panels = [("data", base)]
    path = out / "endpoints.svg"
    scatter_panels(panels, path)
    return [path]
