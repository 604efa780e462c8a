"""Experiment configuration, the ablation/sweep runner, reports and heatmaps.

A run directory holds everything needed to revisit a trained model:
``history.csv``, ``checkpoint/`` (one tensor snapshot per parameter path plus
``manifest.json``) and ``dataset.json`` (enough to regenerate the data).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import Batch, Model, ModelConfig
from .fusion import Family, FusionDims, Variant
from .masking import MaskPlan
from .synthdata import Question, SceneConfig, Split, generate_sample, make_dataset, sample_rng
from .tensor import ContractError, load_snapshot, no_grad, save_snapshot
from .train import Schedule, TrainConfig, TrainingDiverged, train

logger = logging.getLogger(__name__)

SCHEMA = 1
SWEEP_GAMMAS = (0.4, 0.6, 0.8)
SWEEP_BETAS = (0.3, 0.5, 0.7)


class ConfigError(ValueError):
    """A configuration field failed validation; ``field`` is its dotted key path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path
        self.message = message


class CheckpointMissing(FileNotFoundError):
    pass


# -- JSON with fixed float precision -------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    return s if any(ch in s for ch in ".en") else s + ".0"


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits; NaN and inf become null."""
    out = io.StringIO()

    def emit(o, depth):
        pad = " " * (indent * (depth + 1))
        end = " " * (indent * depth)
        if isinstance(o, bool) or o is None:
            out.write(json.dumps(o))
        elif isinstance(o, (int, np.integer)):
            out.write(str(int(o)))
        elif isinstance(o, (float, np.floating)):
            out.write(_fmt_float(float(o)))
        elif isinstance(o, str):
            out.write(json.dumps(o, ensure_ascii=False))
        elif isinstance(o, dict):
            if not o:
                out.write("{}")
                return
            out.write("{\n")
            for i, (k, v) in enumerate(o.items()):
                out.write(f"{pad}{json.dumps(str(k), ensure_ascii=False)}: ")
                emit(v, depth + 1)
                out.write(",\n" if i < len(o) - 1 else "\n")
            out.write(end + "}")
        elif isinstance(o, (list, tuple, np.ndarray)):
            items = list(o)
            if not items:
                out.write("[]")
                return
            if all(isinstance(v, (int, float, bool, np.number)) or v is None for v in items):
                out.write("[")
                for i, v in enumerate(items):
                    emit(v, depth + 1)
                    if i < len(items) - 1:
                        out.write(", ")
                out.write("]")
                return
            out.write("[\n")
            for i, v in enumerate(items):
                out.write(pad)
                emit(v, depth + 1)
                out.write(",\n" if i < len(items) - 1 else "\n")
            out.write(end + "]")
        else:
            raise TypeError(f"cannot serialize {type(o).__name__}")

    emit(obj, 0)
    out.write("\n")
    return out.getvalue()


def write_json(path: Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


# -- configuration -------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ContractError("n_train and n_test must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs shared by every run of an experiment.

    ``family`` "auto" picks the dynamic pipeline for speed questions and the
    static one otherwise; ``qformer_static`` runs the query-transformer
    (dynamic) pipeline on a static question.
    """

    family: str = "auto"
    qformer_static: bool = False
    heads: int = 4
    bottleneck_len: int = 8
    bottleneck_residual: bool = True
    n_layers: int = 2
    mlp_hidden: int | None = None
    proj_hidden: int = 0
    backbone_hidden: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.family not in ("auto", "static", "dynamic"):
            raise ContractError(f"family must be auto, static or dynamic, got {self.family!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.n_layers < 1 or self.heads < 1 or self.bottleneck_len < 1:
            raise ContractError("heads, bottleneck_len and n_layers must be positive")

    def resolve_family(self, scene: SceneConfig) -> Family:
        if self.qformer_static:
            return Family.DYNAMIC
        if self.family != "auto":
            return Family(self.family)
        return Family.DYNAMIC if scene.question is Question.FASTER_OF_TWO else Family.STATIC

    def model_config(self, scene: SceneConfig, variant: Variant) -> ModelConfig:
        dims = FusionDims(width=scene.width, geo_width=scene.geo_width, heads=self.heads,
                          bottleneck_len=self.bottleneck_len, proj_hidden=self.proj_hidden,
                          mlp_hidden=self.mlp_hidden, bottleneck_residual=self.bottleneck_residual)
        return ModelConfig(variant=Variant(variant), family=self.resolve_family(scene), dims=dims,
                           n_layers=self.n_layers, backbone_hidden=self.backbone_hidden,
                           vision_grid=scene.vision_grid, geometry_grid=scene.geometry_grid, dtype=self.dtype)


@dataclass(frozen=True)
class SweepSpec:
    gammas: tuple[float, ...] = SWEEP_GAMMAS
    betas: tuple[float, ...] = SWEEP_BETAS
    variant: Variant = Variant.A
    baseline: Variant = Variant.D
    controls: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "baseline", Variant(self.baseline))
        if not self.gammas or not self.betas:
            raise ContractError("the sweep needs at least one gamma and one beta")
        for v in self.gammas + self.betas:
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"sweep values must lie in [0, 1], got {v}")
        if not self.variant.masked:
            raise ContractError(f"sweep variant {self.variant.value} does not mask")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    variants: tuple[Variant, ...] = tuple(Variant)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sweep: SweepSpec | None = None
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.variants:
            raise ConfigError("variants", "at least one variant is required")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if len(set(self.variants)) != len(self.variants) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("variants" if len(set(self.variants)) != len(self.variants) else "seeds",
                              "entries must be unique")

    @property
    def family(self) -> Family:
        return self.model.resolve_family(self.scene)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = _plain(cfg)
    d["scene"] = cfg.scene.to_dict()
    return d


def _build(cls, d, path: str, convert=None):
    """Instantiate ``cls`` from a mapping, naming the offending key on failure."""
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    kwargs = dict(d)
    if convert:
        kwargs = convert(kwargs, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ContractError, ValueError, TypeError) as exc:
        for key in d:
            try:
                cls(**{key: kwargs[key]})
            except (ContractError, ValueError, TypeError):
                raise ConfigError(f"{path}.{key}", str(exc)) from exc
        raise ConfigError(path, str(exc)) from exc


def _train_convert(kw: dict, path: str) -> dict:
    if "mask" in kw:
        kw["mask"] = _build(MaskPlan, kw["mask"], f"{path}.mask")
    if "schedule" in kw:
        try:
            kw["schedule"] = Schedule(kw["schedule"])
        except ValueError as exc:
            raise ConfigError(f"{path}.schedule", str(exc)) from exc
    return kw


def _check_list(d: dict, key: str) -> None:
    if key in d and not isinstance(d[key], (list, tuple)):
        raise ConfigError(key, f"expected a list, got {type(d[key]).__name__}")


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in d:
        if key not in known:
            raise ConfigError(key, "unknown field")
    _check_list(d, "variants")
    _check_list(d, "seeds")
    kwargs = {
        "scene": _build(SceneConfig, d.get("scene"), "scene"),
        "train": _build(TrainConfig, d.get("train"), "train", _train_convert),
        "model": _build(ModelSpec, d.get("model"), "model"),
        "data": _build(DataSpec, d.get("data"), "data"),
    }
    for key in ("variants", "seeds", "output_dir"):
        if key in d:
            kwargs[key] = d[key]
    if d.get("sweep") is not None:
        kwargs["sweep"] = _build(SweepSpec, d["sweep"], "sweep")
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (ContractError, ValueError, TypeError) as exc:
        bad = "variants" if "variant" in str(exc).lower() or "Variant" in str(exc) else "seeds"
        raise ConfigError(bad, str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError("<file>", f"config file not found: {path}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return config_from_dict(d)


def seeds_from_env(default: tuple[int, ...]) -> tuple[int, ...]:
    """``GEOFUSE_SEED`` ("3" or "1,2,5") replaces the configured seed list."""
    raw = os.environ.get("GEOFUSE_SEED")
    if not raw:
        return default
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError("GEOFUSE_SEED", f"expected comma-separated integers, got {raw!r}") from exc


# -- data ------------------------------------------------------------------------------------


def _digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        for arr in (s.vision, s.geometry, s.prompt):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(int(s.label).to_bytes(1, "little"))
    return h.hexdigest()


def dataset_manifest(scene: SceneConfig, data: DataSpec, train_set=None, test_set=None) -> dict:
    d = {"schema": SCHEMA, "scene": scene.to_dict(), "n_train": data.n_train, "n_test": data.n_test,
         "seed": data.seed}
    if train_set is not None:
        d["sha256"] = {"train": _digest(train_set), "test": _digest(test_set)}
    return d


_DATA_CACHE: dict[str, tuple] = {}


def load_data(scene: SceneConfig, data: DataSpec):
    key = json.dumps([scene.to_dict(), dataclasses.asdict(data)], sort_keys=True)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = make_dataset(scene, data.n_train, data.n_test, data.seed)
    return _DATA_CACHE[key]


# -- checkpoints -----------------------------------------------------------------------------


def model_config_to_dict(mc: ModelConfig) -> dict:
    return _plain(mc)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["dims"] = FusionDims(**d["dims"])
    d["vision_grid"] = tuple(d["vision_grid"])
    d["geometry_grid"] = tuple(d["geometry_grid"])
    d["variant"] = Variant(d["variant"])
    d["family"] = Family(d["family"])
    return ModelConfig(**d)


def save_checkpoint(model: Model, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for path, t in model.named_parameters():
        fname = f"{path}.snap"
        save_snapshot(directory / fname, t.data.astype(np.float64))
        entries.append({"path": path, "file": fname, "shape": list(t.shape)})
    write_json(directory / "manifest.json",
               {"schema": SCHEMA, "model": model_config_to_dict(model.config), "parameters": entries})


def load_checkpoint(directory: Path) -> Model:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.is_file():
        raise CheckpointMissing(f"no checkpoint manifest at {manifest}")
    meta = json.loads(manifest.read_text(encoding="utf-8"))
    model = Model.init(model_config_from_dict(meta["model"]), 0)
    params = dict(model.named_parameters())
    for e in meta["parameters"]:
        f = directory / e["file"]
        if not f.is_file():
            raise CheckpointMissing(f"missing parameter snapshot {f}")
        arr = load_snapshot(f)
        t = params[e["path"]]
        if arr.shape != t.shape:
            raise ContractError(f"snapshot {e['path']} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return model


# -- runs --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    variant: Variant
    seed: int
    mask: MaskPlan
    name: str


def write_history(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss", "eval_acc"])
        for row in history:
            w.writerow([row.step, _fmt_float(row.lr), _fmt_float(row.loss),
                        "" if row.eval_acc is None else _fmt_float(row.eval_acc)])


def diagnostics(model: Model, batch: Batch, chunk: int = 250) -> dict:
    """Mean gate value and relevance-score summary over ``batch`` with masking disabled."""
    alphas, scores = [], []
    with no_grad():
        for start in range(0, len(batch), chunk):
            _, fused = model.forward(batch.take(slice(start, start + chunk)))
            if fused.gate is not None:
                alphas.append(fused.gate.alpha.data.astype(np.float64))
            if fused.relevance is not None:
                scores.append(np.asarray(fused.relevance.s, dtype=np.float64))
    out: dict = {"mean_gate": None, "relevance": None}
    if alphas:
        out["mean_gate"] = float(np.mean(np.concatenate([a.reshape(-1) for a in alphas])))
    if scores:
        s = np.concatenate([x.reshape(-1) for x in scores])
        out["relevance"] = {"mean": float(s.mean()), "std": float(s.std()), "min": float(s.min()),
                            "max": float(s.max())}
    return out


def execute_run(cfg: ExperimentConfig, spec: RunSpec, out_dir: Path, timestamps: bool = True) -> dict:
    run_dir = Path(out_dir) / "runs" / spec.name
    run_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_data(cfg.scene, cfg.data)
    model = Model.init(cfg.model.model_config(cfg.scene, spec.variant), spec.seed)
    tcfg = dataclasses.replace(cfg.train, variant=spec.variant, seed=spec.seed, mask=spec.mask)
    entry: dict = {"variant": spec.variant.value, "seed": spec.seed, "gamma": spec.mask.gamma,
                   "beta": spec.mask.beta, "run": spec.name}
    rel = lambda p: Path(p).relative_to(out_dir).as_posix()  # noqa: E731
    write_json(run_dir / "dataset.json", dataset_manifest(cfg.scene, cfg.data, train_set, test_set))
    t0 = time.perf_counter()
    try:
        result = train(model, train_set, test_set, tcfg,
                       progress=lambda r: logger.info("%s step %d loss %.4f eval %.3f", spec.name, r.step + 1,
                                                      r.loss, r.eval_acc))
    except TrainingDiverged as exc:
        entry.update(status="diverged", error=str(exc), failed_step=exc.step, train_acc=None, test_acc=None)
        return entry
    write_history(run_dir / "history.csv", result.history)
    save_checkpoint(result.model, run_dir / "checkpoint")
    test_b = Batch.from_samples(test_set, np.dtype(model.config.dtype))
    entry.update(
        status="ok",
        train_acc=result.train_acc,
        test_acc=result.test_acc,
        final_loss=float(np.mean([r.loss for r in result.history[-50:]])),
        history=rel(run_dir / "history.csv"),
        checkpoint=rel(run_dir / "checkpoint"),
        **diagnostics(result.model, test_b),
    )
    if timestamps:
        entry["seconds"] = time.perf_counter() - t0
    return entry


def _summary(values: list[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "n": int(a.size)}


def aggregate(entries: list[dict], key: str = "variant") -> dict:
    groups: dict[str, list[dict]] = {}
    for e in entries:
        if e["status"] == "ok":
            groups.setdefault(e[key], []).append(e)
    return {k: {"train_acc": _summary([e["train_acc"] for e in g]), "test_acc": _summary([e["test_acc"] for e in g])}
            for k, g in groups.items()}


def _execute_all(cfg, specs, out_dir, timestamps, jobs):
    if jobs <= 1 or len(specs) <= 1:
        return [execute_run(cfg, s, out_dir, timestamps) for s in specs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(execute_run, cfg, s, out_dir, timestamps) for s in specs]
        return [f.result() for f in futures]  # submission order keeps the join deterministic


def ablation_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    return [RunSpec(v, s, cfg.train.mask, f"{v.value}-seed{s}") for v in cfg.variants for s in cfg.seeds]


def sweep_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    sw = cfg.sweep
    base = cfg.train.mask
    specs = []
    cells = [(g, b) for g in sw.gammas for b in sw.betas]
    if sw.controls:
        cells += [(0.0, base.beta), (base.gamma, 0.0)]
    for g, b in cells:
        plan = MaskPlan(base.mode, g, b)
        for s in cfg.seeds:
            specs.append(RunSpec(sw.variant, s, plan, f"sweep-{sw.variant.value}-g{g:g}-b{b:g}-seed{s}"))
    if sw.controls:
        for s in cfg.seeds:
            specs.append(RunSpec(sw.baseline, s, base, f"sweep-{sw.baseline.value}-seed{s}"))
    return specs


def _sweep_section(cfg: ExperimentConfig, entries: list[dict]) -> dict:
    sw = cfg.sweep

    def cell_mean(variant, g=None, b=None):
        accs = [e["test_acc"] for e in entries if e["status"] == "ok" and e["variant"] == variant.value
                and (g is None or (e["gamma"] == g and e["beta"] == b))]
        return _summary(accs) if accs else None

    cells = []
    for g in sw.gammas:
        for b in sw.betas:
            cells.append({"gamma": g, "beta": b, "test_acc": cell_mean(sw.variant, g, b), "best": False})
    ranked = [c for c in cells if c["test_acc"] is not None]
    best = max(ranked, key=lambda c: c["test_acc"]["mean"]) if ranked else None
    if best is not None:
        best["best"] = True
    section = {"variant": sw.variant.value, "cells": cells,
               "best": None if best is None else {"gamma": best["gamma"], "beta": best["beta"]}}
    if sw.controls:
        base = cell_mean(sw.baseline)
        controls = []
        for name, g, b in (("gamma0", 0.0, cfg.train.mask.beta), ("beta0", cfg.train.mask.gamma, 0.0)):
            acc = cell_mean(sw.variant, g, b)
            delta = None if acc is None or base is None else acc["mean"] - base["mean"]
            controls.append({"name": name, "gamma": g, "beta": b, "test_acc": acc, "delta_vs_baseline": delta,
                             "within_3_points": None if delta is None else abs(delta) <= 0.03})
        section["baseline"] = {"variant": sw.baseline.value, "test_acc": base}
        section["controls"] = controls
    return section


def run_experiment(cfg: ExperimentConfig, out_dir=None, timestamps: bool = True, jobs: int = 1) -> dict:
    """Execute every configured run, write all artifacts, and return the report."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config_to_dict(cfg))
    train_set, test_set = load_data(cfg.scene, cfg.data)
    write_json(out / "dataset.json", dataset_manifest(cfg.scene, cfg.data, train_set, test_set))

    entries = _execute_all(cfg, ablation_specs(cfg), out, timestamps, jobs)
    report: dict = {"schema": SCHEMA}
    if timestamps:
        report["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    report["family"] = cfg.family.value
    report["question"] = cfg.scene.question.value
    report["config"] = config_to_dict(cfg)
    report["runs"] = entries
    report["aggregate"] = aggregate(entries)
    if cfg.sweep is not None:
        sweep_entries = _execute_all(cfg, sweep_specs(cfg), out, timestamps, jobs)
        report["sweep_runs"] = sweep_entries
        report["sweep"] = _sweep_section(cfg, sweep_entries)
        entries = entries + sweep_entries
    failed = [e["run"] for e in entries if e["status"] != "ok"]
    report["partial"] = bool(failed)
    report["failed_runs"] = failed
    write_json(out / "report.json", report)
    _write_summary(out / "summary.csv", report["aggregate"])
    return report


def _write_summary(path: Path, agg: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "n", "train_mean", "train_std", "test_mean", "test_std"])
        for v, a in agg.items():
            w.writerow([v, a["test_acc"]["n"], _fmt_float(a["train_acc"]["mean"]), _fmt_float(a["train_acc"]["std"]),
                        _fmt_float(a["test_acc"]["mean"]), _fmt_float(a["test_acc"]["std"])])


# -- heatmaps --------------------------------------------------------------------------------


def _grid_rows(values: np.ndarray, grid: tuple[int, int, int]):
    h, w, _ = grid
    for n, v in enumerate(values):
        yield n // (h * w), (n % (h * w)) // w, n % w, float(v)


def heatmap_values(model: Model, sample) -> dict[str, np.ndarray]:
    """Relevance ``s`` and channel-mean gate per vision position for one sample (masking off)."""
    batch = Batch.from_samples([sample], np.dtype(model.config.dtype))
    with no_grad():
        _, fused = model.forward(batch)
    out = {}
    if fused.relevance is not None:
        out["relevance"] = np.asarray(fused.relevance.s, dtype=np.float64).reshape(-1)
    if fused.gate is not None:
        out["gate"] = fused.gate.alpha.data.astype(np.float64)[0].mean(axis=-1)
    return out


def export_heatmaps(run_dir, sample_index: int, out_dir=None) -> dict[str, Path]:
    """Write ``relevance.csv`` and/or ``gate.csv`` with columns ``t,h,w,value`` for one test sample."""
    run_dir = Path(run_dir)
    model = load_checkpoint(run_dir / "checkpoint")
    manifest_path = run_dir / "dataset.json"
    if not manifest_path.is_file():
        raise CheckpointMissing(f"no dataset manifest at {manifest_path}")
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    scene = SceneConfig.from_dict(meta["scene"])
    if not 0 <= sample_index < meta["n_test"]:
        raise ContractError(f"sample index {sample_index} outside the {meta['n_test']} test samples")
    sample = generate_sample(scene, Split.TEST, sample_rng(meta["seed"], Split.TEST, sample_index),
                             target_label=sample_index % 2)
    values = heatmap_values(model, sample)
    if not values:
        raise ContractError(f"variant {model.config.variant.value} has neither relevance scores nor a gate")
    dest = Path(out_dir) if out_dir else run_dir / "heatmaps" / f"sample{sample_index}"
    dest.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, vals in values.items():
        path = dest / f"{name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "h", "w", "value"])
            for t, h, ww, v in _grid_rows(vals, model.config.vision_grid):
                w.writerow([t, h, ww, _fmt_float(v)])
        written[name] = path
    return written
