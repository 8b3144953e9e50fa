import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pitl import experiments as ex
from pitl.cells import Model, ModelSpec
from pitl.cli import main
from pitl.data import ingest_csv

TINY = {
    "target": {"n_points": 120, "validation_len": 30, "train_windows": 40},
    "open_source": {"n_points": 80, "model": {"depth": 3, "width": 4}, "pretrain": {"epochs": 2, "batch_size": 32}},
    "industrial": {"n_points": 80, "plant_points": 100, "model": {"depth": 3, "width": 4}, "pretrain": {"epochs": 2, "batch_size": 32}},
    "train": {"epochs": 3},
    "fine_tune": {"epochs": 2},
    "models": [
        {"preset": "standard", "depth": 2, "width": 4},
        {"preset": "more_complex", "depth": 2, "width": 6},
        {"preset": "less_complex", "depth": 1, "width": 3},
        {"preset": "open_source_tl", "depth": 1, "width": 4},
        {"preset": "industrial_tl", "depth": 1, "width": 4},
        {"preset": "pitl", "depth": 1, "width": 4},
    ],
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def tiny(**extra):
    return {**json.loads(json.dumps(TINY)), **extra}


# -- usage and config errors ---------------------------------------------------------


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["train"]) == 2  # --config is required


def test_unknown_key_rejected(tmp_path, capsys):
    assert main(["train", "--config", write_cfg(tmp_path, {"model": "standard", "colour": "red"})]) == 2
    assert "colour" in capsys.readouterr().err


def test_nested_unknown_key_rejected(tmp_path):
    with pytest.raises(ex.ConfigError, match="train"):
        ex.resolve_config({"train": {"epochs": 1, "momentum": 0.9}})


def test_bad_json_and_missing_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_wrong_command_for_preset(tmp_path):
    assert main(["train", "--config", write_cfg(tmp_path, tiny(model="pitl")), "--out", str(tmp_path / "o")]) == 2
    assert main(["transfer", "--config", write_cfg(tmp_path, tiny(model="standard")), "--out", str(tmp_path / "o")]) == 2


def test_missing_target_csv_is_config_error(tmp_path, capsys):
    doc = tiny(model="standard")
    doc["target"]["csv"] = str(tmp_path / "nowhere.csv")
    assert main(["train", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "o")]) == 2
    assert "nowhere.csv" in capsys.readouterr().err


# -- presets ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,depth,width",
    [("standard", 5, 30), ("more_complex", 6, 60), ("less_complex", 3, 20)],
)
def test_baseline_presets(name, depth, width):
    mc = ex.resolve_model(name)
    assert (mc["type"], mc["kind"], mc["depth"], mc["width"]) == ("baseline", "lstm", depth, width)


def test_transfer_presets():
    o, i, p = (ex.resolve_model(n) for n in ("open_source_tl", "industrial_tl", "pitl"))
    assert (o["source"], o["k_transfer"], o["kind"], o["depth"], o["width"], o["fine_tune_lr"]) == ("open_source", 3, "lstm", 6, 30, 1e-5)
    assert (i["source"], i["k_transfer"], i["kind"], i["depth"], i["width"], i["physics"]) == ("industrial", 3, "lstm", 3, 30, False)
    assert (p["source"], p["kind"], p["physics"]) == ("industrial", "simple_rnn", True)
    d = ex.DEFAULTS
    assert (d["open_source"]["model"], d["open_source"]["n_points"]) == ({"kind": "lstm", "depth": 5, "width": 25}, 673)
    assert (d["industrial"]["model"], d["industrial"]["train_ratio"], d["industrial"]["n_points"]) == ({"kind": "lstm", "depth": 6, "width": 120}, 0.8, 600)
    assert (d["target"]["window"], d["target"]["train_ratio"], d["target"]["validation_len"]) == (5, 0.9, 200)


def test_preset_override_rejects_foreign_keys():
    with pytest.raises(ex.ConfigError):
        ex.resolve_model({"preset": "standard", "k_transfer": 2})


# -- simulate ---------------------------------------------------------------------------


def test_simulate_default_sizes_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a), "--seed", "3"]) == 0
    assert main(["simulate", "--out", str(b), "--seed", "3"]) == 0
    src = ingest_csv(a / "source_open.csv")
    ind = ingest_csv(a / "industrial.csv")
    tgt = ingest_csv(a / "target.csv")
    assert len(src) == 673 and src.n_features == 8
    assert len(ind) == 600 and ind.n_features == 4
    assert len(tgt) == 900 and tgt.n_features == 10
    for f in ("source_open.csv", "industrial.csv", "target.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


# -- train and transfer ------------------------------------------------------------------


def run_dir_bytes(d: Path) -> dict:
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                doc = json.loads(data)
                doc.pop("created_at")
                data = json.dumps(doc, sort_keys=True).encode()
            out[str(p.relative_to(d))] = data
    return out


def test_train_writes_artifacts_and_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, tiny(model={"preset": "standard", "depth": 2, "width": 4}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--out", str(a)]) == 0
    assert main(["train", "--config", cfg, "--out", str(b)]) == 0
    for f in ("model.json", "history.csv", "predictions.csv", "manifest.json", "report.csv", "report.txt"):
        assert (a / f).is_file()
    man = json.loads((a / "manifest.json").read_text())
    assert man["status"] == "ok" and set(man["metrics"]) == set(ex.METRIC_KEYS)
    assert all(v >= 0 for v in man["metrics"].values())
    assert man["files"]["model.json"] and len(list(csv.reader(open(a / "history.csv")))) == 4
    assert run_dir_bytes(a) == run_dir_bytes(b)


def test_only_timestamp_is_created_at(tmp_path):
    cfg = write_cfg(tmp_path, tiny(model={"preset": "standard", "depth": 1, "width": 3}))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    text = (tmp_path / "a" / "manifest.json").read_text()
    stamp = json.loads(text)["created_at"]
    assert text.count(stamp[:10]) == 1


def test_zero_epoch_train_keeps_initial_model(tmp_path):
    doc = tiny(model={"preset": "standard", "depth": 2, "width": 4}, seed=7)
    doc["train"] = {"epochs": 0}
    assert main(["train", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "o")]) == 0
    saved = Model.load(tmp_path / "o" / "model.json")
    assert saved.param_digest() == Model.init(ModelSpec.stack(10, "lstm", 2, 4), 7).param_digest()


def test_divergence_exits_1_with_diagnostic(tmp_path, capsys):
    doc = tiny(model={"preset": "standard", "depth": 1, "width": 8})
    doc["train"] = {"epochs": 50, "learning_rate": 1e4}
    out = tmp_path / "o"
    assert main(["train", "--config", write_cfg(tmp_path, doc), "--out", str(out)]) == 1
    assert "diverged" in capsys.readouterr().err
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "diverged"
    assert "excluded" in (out / "report.csv").read_text()


@pytest.mark.parametrize("preset", ["open_source_tl", "industrial_tl", "pitl"])
def test_transfer_presets_run(tmp_path, preset):
    out = tmp_path / preset
    doc = tiny(model={"preset": preset, "depth": 1, "width": 4})
    assert main(["transfer", "--config", write_cfg(tmp_path, doc), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["extra"]["plan"]["k_transfer"] == 3
    assert (out / "step3_history.csv").is_file() and (out / "step4_history.csv").is_file()
    assert (out / "source" / "model.json").is_file()
    assert ("final_physics_residual" in man["extra"]) == (preset == "pitl")


def test_transfer_from_saved_source(tmp_path):
    src = Model.init(ModelSpec.stack(4, "lstm", 3, 4), 0)
    src.save(tmp_path / "src.json")
    doc = tiny(model={"preset": "industrial_tl", "depth": 1, "width": 4}, source_model=str(tmp_path / "src.json"))
    assert main(["transfer", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["source"]["digest"] == src.param_digest()


def test_transfer_composition_error_is_config_error(tmp_path, capsys):
    doc = tiny(model={"preset": "industrial_tl", "depth": 1, "width": 4, "adapter_width": 5})
    assert main(["transfer", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "o")]) == 2
    assert "junction" in capsys.readouterr().err


# -- report -------------------------------------------------------------------------------


def fake_manifest(name, seed, values, status="ok"):
    return {
        "name": name,
        "seed": seed,
        "status": status,
        "diagnostic": "" if status == "ok" else "objective diverged",
        "config_hash": "abc",
        "metrics": dict(zip(ex.METRIC_KEYS, values)),
    }


def write_manifest(d: Path, m: dict):
    d.mkdir(parents=True)
    (d / "manifest.json").write_text(json.dumps(m))


def test_report_single_run(tmp_path, capsys):
    write_manifest(tmp_path / "r", fake_manifest("standard", 1, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
    assert main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
    assert len(rows) == 1 and rows[0]["stat"] == "value" and float(rows[0]["val_mse"]) == 0.3
    assert "Validation MSE" in capsys.readouterr().out


def test_report_median_and_iqr_match_order_statistics(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.uniform(0, 1, size=(5, 6))
    for s in range(5):
        write_manifest(tmp_path / f"s{s}", fake_manifest("pitl", s + 1, list(vals[s])))
    rows = ex.build_report(ex.find_manifests([tmp_path]))
    assert [r["stat"] for r in rows] == ["median", "iqr"]
    srt = np.sort(vals, axis=0)
    for k, key in enumerate(ex.METRIC_KEYS):
        assert rows[0][key] == srt[2, k]
        assert rows[1][key] == pytest.approx(srt[3, k] - srt[1, k], abs=1e-15)


def test_report_excludes_divergent_runs(tmp_path):
    write_manifest(tmp_path / "a", fake_manifest("standard", 1, [0.1] * 6))
    write_manifest(tmp_path / "b", fake_manifest("standard", 2, [float("nan")] * 6))
    write_manifest(tmp_path / "c", fake_manifest("standard", 3, [None] * 6, status="diverged"))
    rows = ex.build_report(ex.find_manifests([tmp_path]))
    assert [r["stat"] for r in rows] == ["excluded", "excluded", "value"]
    text = ex.report_csv(rows)
    assert "nan" not in text.lower() and "inf" not in text.lower()


def test_report_errors(tmp_path):
    assert main(["report"]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2


# -- benchmark ---------------------------------------------------------------------------------


def test_benchmark_counts_table_and_determinism(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, tiny())
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("PITL_THREADS", "1")
    assert main(["benchmark", "--config", cfg, "--out", str(a), "--seeds", "1", "2", "3", "4", "5"]) == 0
    monkeypatch.setenv("PITL_THREADS", "2")
    assert main(["benchmark", "--config", cfg, "--out", str(b), "--seeds", "1", "2", "3", "4", "5"]) == 0
    manifests = [p for p in a.rglob("manifest.json")]
    assert len(manifests) == 30
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()
    header = (a / "report.txt").read_text().splitlines()[0]
    for label in ex.METRIC_LABELS:
        assert label in header
    rows = list(csv.DictReader(open(a / "report.csv")))
    assert [r["model"] for r in rows[::2]] == list(ex.BENCHMARK_MODELS)
    with open(a / "predictions_seed_1.csv") as fh:
        head = next(csv.reader(fh))
    assert head == ["split", "day", "actual", *ex.BENCHMARK_MODELS]


def test_benchmark_stage_failure_names_stage(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(ex, "pretrain", boom)
    assert main(["benchmark", "--config", write_cfg(tmp_path, tiny()), "--out", str(tmp_path / "o"), "--seeds", "1"]) == 1
    assert "pretrain open_source (seed 1)" in capsys.readouterr().err
