"""Presets, config handling, run drivers and reporting behind the ``pitl`` command.

A run directory holds ``manifest.json`` (config, seed, metrics, file hashes;
``created_at`` is its only timestamp), the model JSON, training histories and
a plot-ready ``predictions.csv``.  Metrics are on the normalized scale.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .asm1 import (
    INDUSTRIAL_FEATURES,
    TARGET_FEATURES,
    PlantConfig,
    emit_plant_dataset,
    emit_source_dataset,
    industrial_plant_config,
    load_defaults,
)
from .cells import Model, ModelSpec, dumps
from .data import Dataset, NormStats, WindowBatch, derive_industrial, ingest_csv, write_csv
from .training import History, PhysicsConfigError, PhysicsLossConfig, TrainConfig, TrainingDiverged, asm1_rate, evaluate, train
from .transfer import (
    CompositionError,
    PretrainResult,
    TransferPlan,
    compose_custom,
    fine_tune,
    prepare_windows,
    pretrain_source,
    save_model,
    train_custom,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "validation")
METRIC_KEYS = ("train_mse", "test_mse", "val_mse", "train_mae", "test_mae", "val_mae")
METRIC_LABELS = ("Train MSE", "Test MSE", "Validation MSE", "Train MAE", "Test MAE", "Validation MAE")
BENCHMARK_MODELS = ("standard", "more_complex", "less_complex", "open_source_tl", "industrial_tl", "pitl")

PRESETS: dict[str, dict] = {
    "standard": {"type": "baseline", "kind": "lstm", "depth": 5, "width": 30},
    "more_complex": {"type": "baseline", "kind": "lstm", "depth": 6, "width": 60},
    "less_complex": {"type": "baseline", "kind": "lstm", "depth": 3, "width": 20},
    "open_source_tl": {
        "type": "transfer",
        "source": "open_source",
        "k_transfer": 3,
        "kind": "lstm",
        "depth": 6,
        "width": 30,
        "adapter_width": None,
        "fine_tune_lr": 1e-5,
        "physics": False,
    },
    "industrial_tl": {
        "type": "transfer",
        "source": "industrial",
        "k_transfer": 3,
        "kind": "lstm",
        "depth": 3,
        "width": 30,
        "adapter_width": None,
        "fine_tune_lr": 1e-5,
        "physics": False,
    },
    "pitl": {
        "type": "transfer",
        "source": "industrial",
        "k_transfer": 3,
        "kind": "simple_rnn",
        "depth": 3,
        "width": 30,
        "adapter_width": None,
        "fine_tune_lr": 1e-5,
        "physics": True,
    },
}

_FEATURE_MAP = PlantConfig().feature_map

DEFAULTS: dict = {
    "seed": 1,
    "seeds": [1, 2, 3, 4, 5],
    "out": "runs",
    "target": {
        "csv": None,
        "n_points": 900,
        "target_noise": 0.25,
        "feature_noise": 0.02,
        "train_ratio": 0.9,
        "validation_len": 200,
        "window": 5,
        "train_windows": 70,
    },
    "open_source": {
        "csv": None,
        "n_points": 673,
        "seed_offset": 1000,
        "train_ratio": 0.9,
        "model": {"kind": "lstm", "depth": 5, "width": 25},
        "pretrain": {"epochs": 100, "learning_rate": 1e-3, "batch_size": 64},
    },
    "industrial": {
        "csv": None,
        "n_points": 600,
        "plant_points": 900,
        "noise_std_frac": 0.05,
        "columns": list(INDUSTRIAL_FEATURES),
        "seed_offset": 2000,
        "train_ratio": 0.8,
        "model": {"kind": "lstm", "depth": 6, "width": 120},
        "pretrain": {"epochs": 50, "learning_rate": 1e-3, "batch_size": 96},
    },
    "train": {"epochs": 300, "learning_rate": 1e-3, "batch_size": 32},
    "fine_tune": {"epochs": 20, "batch_size": 32},
    "physics": {
        "alpha": 0.1,
        "dt": 1.0,
        "kla": PlantConfig.kla,
        "so_sat": PlantConfig.so_sat,
        "feature_map": {k: list(v) for k, v in _FEATURE_MAP.items()},
    },
    "models": list(BENCHMARK_MODELS),
}


class ConfigError(ValueError):
    """Invalid or unusable configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed at run time (CLI exit code 1)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration --------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files("pitl").joinpath("config.schema.json").read_text(encoding="utf-8"))


def validate_config(doc) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "feature_map":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(doc: dict | None = None) -> dict:
    """Validate ``doc`` and lay it over the defaults."""
    doc = doc or {}
    validate_config(doc)
    return _merge(DEFAULTS, doc)


def read_config(path) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    try:
        return resolve_config(doc)
    except ConfigError as e:
        raise ConfigError(f"{p}: {e}") from None


def resolve_model(entry) -> dict:
    """A preset name or {"preset": ..., overrides} -> full model description."""
    if isinstance(entry, str):
        entry = {"preset": entry}
    preset = entry["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    out = {"name": preset, "preset": preset, **copy.deepcopy(PRESETS[preset])}
    for k, v in entry.items():
        if k != "preset" and k not in out:
            raise ConfigError(f"key {k!r} does not apply to preset {preset!r}")
        out[k] = v
    if out["type"] == "baseline" and out["depth"] < 1:
        raise ConfigError(f"model {out['name']!r}: a baseline needs depth >= 1")
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_hashable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _hashable(cfg: dict) -> dict:
    # where results land, and which seed runs, are recorded separately
    return {k: v for k, v in cfg.items() if k not in ("out", "seeds", "seed")}


def train_config(section: dict, seed: int = 0, **override) -> TrainConfig:
    return TrainConfig(seed=seed, **{**section, **override})


# -- datasets ------------------------------------------------------------------------


def _maybe_csv(path, what: str) -> Dataset | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} CSV not found: {p}")
    return ingest_csv(p)


def target_dataset(cfg: dict, seed: int) -> Dataset:
    tc = cfg["target"]
    ds = _maybe_csv(tc["csv"], "target")
    if ds is not None:
        return ds
    plant = PlantConfig(
        kla=cfg["physics"]["kla"],
        so_sat=cfg["physics"]["so_sat"],
        target_noise=tc["target_noise"],
        feature_noise=tc["feature_noise"],
    )
    return emit_plant_dataset(seed, tc["n_points"], config=plant, name="target").select(TARGET_FEATURES)


def open_source_dataset(cfg: dict, seed: int) -> Dataset:
    sc = cfg["open_source"]
    return _maybe_csv(sc["csv"], "open-source") or emit_source_dataset(seed + sc["seed_offset"], sc["n_points"])


def industrial_dataset(cfg: dict, seed: int) -> Dataset:
    sc = cfg["industrial"]
    ds = _maybe_csv(sc["csv"], "industrial")
    if ds is not None:
        return ds
    plant = emit_plant_dataset(
        seed + sc["seed_offset"], sc["plant_points"], config=industrial_plant_config(), name="industrial_plant"
    )
    return derive_industrial(plant, seed, sc["noise_std_frac"], sc["columns"], sc["n_points"], name="industrial")


def source_dataset(cfg: dict, source: str, seed: int) -> Dataset:
    return open_source_dataset(cfg, seed) if source == "open_source" else industrial_dataset(cfg, seed)


@dataclass
class TargetData:
    dataset: Dataset
    stats: NormStats
    splits: dict[str, WindowBatch]


def target_data(cfg: dict, seed: int) -> TargetData:
    tc = cfg["target"]
    ds = target_dataset(cfg, seed)
    stats, splits = prepare_windows(ds, tc["train_ratio"], tc["validation_len"], tc["window"])
    if "train" not in splits:
        raise ConfigError("target training split is shorter than one window")
    if tc["train_windows"]:
        splits["train"] = splits["train"].tail(tc["train_windows"])
    return TargetData(ds, stats, splits)


def physics_config(cfg: dict, stats: NormStats) -> PhysicsLossConfig:
    pc = cfg["physics"]
    params = load_defaults().with_aeration(pc["kla"], pc["so_sat"])
    fmap = {k: (v[0], float(v[1])) for k, v in pc["feature_map"].items()}
    return PhysicsLossConfig(pc["alpha"], asm1_rate(params), fmap, pc["dt"], stats)


# -- runs --------------------------------------------------------------------------------


@dataclass
class RunResult:
    name: str
    seed: int
    model_cfg: dict
    status: str = "ok"
    diagnostic: str = ""
    model: Model | None = None
    histories: dict[str, History] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def split_metrics(model: Model, splits: dict[str, WindowBatch]) -> dict[str, float]:
    out = {}
    for split, short in zip(SPLITS, ("train", "test", "val")):
        if split in splits and len(splits[split]):
            ev = evaluate(model, splits[split])
            out[f"{short}_mse"], out[f"{short}_mae"] = ev["mse"], ev["mae"]
        else:
            out[f"{short}_mse"] = out[f"{short}_mae"] = None
    return {k: out[k] for k in METRIC_KEYS}


def run_baseline(model_cfg: dict, cfg: dict, data: TargetData, seed: int) -> RunResult:
    res = RunResult(model_cfg["name"], seed, model_cfg)
    spec = ModelSpec.stack(data.dataset.n_features, model_cfg["kind"], model_cfg["depth"], model_cfg["width"])
    res.model = Model.init(spec, seed)
    try:
        res.histories["train"] = train(
            res.model, data.splits["train"], train_config(cfg["train"], seed), val=data.splits.get("validation")
        )
    except TrainingDiverged as e:
        res.status, res.diagnostic = "diverged", str(e)
        return res
    res.metrics = split_metrics(res.model, data.splits)
    return res


def pretrain(cfg: dict, source: str, seed: int) -> PretrainResult:
    sc = cfg[source]
    ds = source_dataset(cfg, source, seed)
    spec = ModelSpec.stack(ds.n_features, sc["model"]["kind"], sc["model"]["depth"], sc["model"]["width"])
    return pretrain_source(spec, ds, train_config(sc["pretrain"], seed), seed, sc["train_ratio"], 0, cfg["target"]["window"])


def run_transfer_model(
    model_cfg: dict, cfg: dict, data: TargetData, source_model: Model, seed: int
) -> RunResult:
    res = RunResult(model_cfg["name"], seed, model_cfg)
    physics = physics_config(cfg, data.stats) if model_cfg["physics"] else None
    plan_kw = dict(adapter_width=model_cfg["adapter_width"], fine_tune_lr=model_cfg["fine_tune_lr"], physics=physics, seed=seed)
    plan = TransferPlan.uniform(model_cfg["k_transfer"], model_cfg["depth"], model_cfg["width"], model_cfg["kind"], **plan_kw)
    if physics is not None:
        physics.check_features(data.splits["train"].feature_names)
    res.model = compose_custom(source_model, plan, data.dataset.n_features)
    val = data.splits.get("validation")
    try:
        res.histories["step3"] = train_custom(res.model, data.splits["train"], train_config(cfg["train"], seed), physics, val)
        step4 = train_config({"learning_rate": plan.fine_tune_lr, **cfg["fine_tune"]}, seed)
        res.histories["step4"] = fine_tune(res.model, data.splits["train"], step4, plan.fine_tune_lr, physics, val)
    except TrainingDiverged as e:
        res.status, res.diagnostic = "diverged", str(e)
        return res
    res.metrics = split_metrics(res.model, data.splits)
    if physics is not None:
        res.extra["final_physics_residual"] = evaluate(res.model, data.splits["train"], physics)["physics"]
    res.extra["plan"] = plan.to_dict()
    return res


# -- artifacts -----------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else format(v, ".17g")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prediction_rows(model: Model, data: TargetData) -> list[tuple]:
    """(split, day, actual, predicted) in physical units."""
    rows = []
    name = data.dataset.target_name
    for split in SPLITS:
        wb = data.splits.get(split)
        if wb is None or not len(wb):
            continue
        pred = data.stats.unscale_column(name, model.predict(wb.x))
        actual = data.stats.unscale_column(name, wb.y)
        rows.extend((split, t, a, p) for t, a, p in zip(wb.target_t, actual, pred))
    return rows


def write_predictions(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "day", "actual", "predicted"])
        for split, t, a, p in rows:
            w.writerow([split, _fmt(t), _fmt(a), _fmt(p)])


def write_run(run_dir: Path, res: RunResult, cfg: dict, data: TargetData, source_info: dict | None = None) -> dict:
    """Persist one run and return its manifest."""
    run_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    if res.model is not None and res.status == "ok":
        save_model(res.model, run_dir / "model.json")
        write_predictions(run_dir / "predictions.csv", prediction_rows(res.model, data))
        files["model.json"] = files["predictions.csv"] = None
    for step, hist in res.histories.items():
        fname = "history.csv" if step == "train" else f"{step}_history.csv"
        hist.write_csv(run_dir / fname)
        files[fname] = None
    manifest = {
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "name": res.name,
        "seed": res.seed,
        "status": res.status,
        "diagnostic": res.diagnostic,
        "model": res.model_cfg,
        "config": _hashable(cfg),
        "config_hash": config_hash(cfg),
        "target": {"name": data.dataset.name, "rows": len(data.dataset), "provenance": data.dataset.provenance},
        "metrics": res.metrics,
        "extra": res.extra,
        "files": {f: _sha(run_dir / f) for f in sorted(files)},
    }
    if source_info is not None:
        manifest["source"] = source_info
    write_json(run_dir / "manifest.json", manifest)
    return manifest


def write_source(src_dir: Path, name: str, pre: PretrainResult) -> dict:
    src_dir.mkdir(parents=True, exist_ok=True)
    pre.model.save(src_dir / "model.json")
    pre.history.write_csv(src_dir / "history.csv")
    return {
        "name": name,
        "digest": pre.model.param_digest(),
        "metrics": pre.metrics,
        "model_sha256": _sha(src_dir / "model.json"),
    }


# -- reporting --------------------------------------------------------------------------


def find_manifests(run_dirs) -> list[dict]:
    if not run_dirs:
        raise ConfigError("no run directories given")
    out = []
    for d in run_dirs:
        d = Path(d)
        found = [d / "manifest.json"] if (d / "manifest.json").is_file() else sorted(d.rglob("manifest.json"))
        if not found:
            raise ConfigError(f"no manifest.json under {d}")
        out.extend(json.loads(p.read_text(encoding="utf-8")) for p in found)
    return out


def _finite(metrics: dict) -> bool:
    return all(v is None or np.isfinite(v) for v in metrics.values())


def build_report(manifests: list[dict], order: list[str] | None = None) -> list[dict]:
    """One row per model for a single seed; median and IQR rows for several.

    Divergent or non-finite runs never enter the statistics; each gets a
    marker row instead.
    """
    names = list(order or [])
    for m in manifests:
        if m["name"] not in names:
            names.append(m["name"])
    rows = []
    for name in names:
        runs = sorted((m for m in manifests if m["name"] == name), key=lambda m: m["seed"])
        good = [m for m in runs if m["status"] == "ok" and _finite(m["metrics"])]
        for m in runs:
            if m not in good:
                rows.append({"model": name, "stat": "excluded", "seeds": str(m["seed"]), **{k: None for k in METRIC_KEYS}, "note": m["diagnostic"] or "non-finite metrics"})
        if not good:
            continue
        seeds = " ".join(str(m["seed"]) for m in good)
        hashes = sorted({m["config_hash"] for m in good})
        note = "config " + ",".join(hashes)
        table = {k: [m["metrics"][k] for m in good] for k in METRIC_KEYS}
        if len(good) == 1:
            rows.append({"model": name, "stat": "value", "seeds": seeds, **{k: v[0] for k, v in table.items()}, "note": note})
            continue
        med, iqr = {}, {}
        for k, vals in table.items():
            if any(v is None for v in vals):
                med[k] = iqr[k] = None
                continue
            q25, q50, q75 = np.percentile(vals, [25, 50, 75])
            med[k], iqr[k] = float(q50), float(q75 - q25)
        rows.append({"model": name, "stat": "median", "seeds": seeds, **med, "note": note})
        rows.append({"model": name, "stat": "iqr", "seeds": seeds, **iqr, "note": note})
    return rows


REPORT_COLUMNS = ("model", "stat", "seeds", *METRIC_KEYS, "note")


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) if c in METRIC_KEYS else r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_text(rows: list[dict]) -> str:
    head = ["Model", "Stat", *METRIC_LABELS]
    body = [[r["model"], r["stat"], *("-" if r[k] is None else f"{r[k]:.4f}" for k in METRIC_KEYS)] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(head), line(["-" * w for w in widths])]
    out.extend(line(b) for b in body)
    return "\n".join(out) + "\n"


def write_report(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    (out_dir / "report.txt").write_text(report_text(rows), encoding="utf-8")


# -- benchmark -------------------------------------------------------------------------------


def run_seed(cfg: dict, seed: int, out: Path) -> list[dict]:
    """Every configured model on one seed; sources are pretrained once each."""

    def stage(label, fn, *args):
        try:
            return fn(*args)
        except (ConfigError, StageError, PhysicsConfigError, CompositionError):
            raise
        except Exception as e:  # noqa: BLE001 - rewrapped with the stage name
            raise StageError(f"{label} (seed {seed})", e) from e

    models = [resolve_model(e) for e in cfg["models"]]
    data = stage("target data", target_data, cfg, seed)
    sources: dict[str, tuple[PretrainResult, dict]] = {}
    manifests = []
    for mc in models:
        run_dir = out / mc["name"] / f"seed_{seed}"
        if mc["type"] == "baseline":
            res = stage(f"train {mc['name']}", run_baseline, mc, cfg, data, seed)
            manifests.append(write_run(run_dir, res, cfg, data))
            continue
        src = mc["source"]
        if src not in sources:
            pre = stage(f"pretrain {src}", pretrain, cfg, src, seed)
            sources[src] = (pre, write_source(out / "sources" / src / f"seed_{seed}", src, pre))
        pre, info = sources[src]
        res = stage(f"transfer {mc['name']}", run_transfer_model, mc, cfg, data, pre.model, seed)
        manifests.append(write_run(run_dir, res, cfg, data, info))
    write_seed_predictions(out / f"predictions_seed_{seed}.csv", out, [mc["name"] for mc in models], seed)
    return manifests


def write_seed_predictions(path: Path, out: Path, names: list[str], seed: int) -> None:
    """Day, split, actual and one predicted column per model (blank if it diverged)."""
    cols: dict[str, dict] = {}
    base = None
    for name in names:
        p = out / name / f"seed_{seed}" / "predictions.csv"
        if not p.is_file():
            cols[name] = {}
            continue
        with open(p, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        cols[name] = {(r["split"], r["day"]): r["predicted"] for r in rows}
        if base is None:
            base = [(r["split"], r["day"], r["actual"]) for r in rows]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "day", "actual", *names])
        for split, day, actual in base or []:
            w.writerow([split, day, actual, *(cols[n].get((split, day), "") for n in names)])


def _seed_job(args):
    cfg, seed, out = args
    return run_seed(cfg, seed, Path(out))


def benchmark(cfg: dict, seeds: list[int], out: Path, threads: int | None = None) -> list[dict]:
    """All models on all seeds; writes the aggregate report to ``out``."""
    if not seeds:
        raise ConfigError("benchmark needs at least one seed")
    if threads is None:
        try:
            threads = int(os.environ.get("PITL_THREADS", "1") or 1)
        except ValueError:
            raise ConfigError("PITL_THREADS must be an integer") from None
    jobs = [(cfg, s, str(out)) for s in seeds]
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
            per_seed = list(pool.map(_seed_job, jobs))
    else:
        per_seed = [_seed_job(j) for j in jobs]
    manifests = [m for ms in per_seed for m in ms]
    rows = build_report(manifests, [resolve_model(e)["name"] for e in cfg["models"]])
    write_report(rows, out)
    return rows
