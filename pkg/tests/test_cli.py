import json
import subprocess
import sys
import time

import numpy as np
import pytest

from sweetexit.cli import STATUS, main, version_string

TINY_MODEL = {"n_layers": 3, "d_model": 8, "n_heads": 2, "d_ff": 16, "vocab_size": 64, "max_seq_len": 10, "exit_layers": [1, 2, 3]}
TINY_SPEC = {"vocab_size": 40, "seq_len": 10, "cues_per_class": 4, "size": 96, "validation_size": 40, "seed": 3}


def run(argv, capsys):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


@pytest.fixture
def workspace(tmp_path, capsys):
    (tmp_path / "spec.json").write_text(json.dumps(TINY_SPEC))
    status, _, _ = run(["gen-data", "--spec", tmp_path / "spec.json", "--out", tmp_path / "data"], capsys)
    assert status == 0
    cfg = {
        "model": TINY_MODEL,
        "training": {"batch_size": 16, "epochs": 1, "seed": 2},
        "data": {"train": "data/train.jsonl", "validation": "data/validation.jsonl"},
    }
    (tmp_path / "train.json").write_text(json.dumps(cfg))
    return tmp_path


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if "manifest" not in p.name}


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    assert sum(1 for _ in open(data / "train.jsonl")) == 96
    assert sum(1 for _ in open(data / "validation.jsonl")) == 40
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["version"].startswith("v")


def test_train_eval_curve_conflict(workspace, capsys):
    w = workspace
    status, out, _ = run(["train", "--config", w / "train.json", "--regime", "sweet", "--out", w / "run"], capsys)
    assert status == 0, out
    assert {"model.mxex", "train_log.jsonl", "vocab.json", "manifest.json"} <= {p.name for p in (w / "run").iterdir()}
    manifest = json.loads((w / "run" / "manifest.json").read_text())
    assert manifest["config"]["training"]["regime"] == "sweet"
    assert set(manifest["seeds"]) == {"init_seed", "seed"}
    log = [json.loads(l) for l in open(w / "run" / "train_log.jsonl")]
    assert len(log) == 6 and log[0]["regime"] == "sweet"

    status, out, _ = run(["eval", "--model", w / "run", "--data", w / "data/validation.jsonl"], capsys)
    assert status == 0 and len(json.loads(out)["exit_scores"]) == 3

    status, out, _ = run(["calibrate", "--model", w / "run", "--data", w / "data/validation.jsonl"], capsys)
    assert status == 0 and (w / "run" / "temperatures.json").exists()

    for policy in ("confidence", "lte"):
        out_csv = w / "curves" / f"{policy}.csv"
        status, out, err = run(
            ["curve", "--model", w / "run", "--policy", policy, "--data", w / "data/validation.jsonl", "--out", out_csv,
             "--traces", w / "curves" / f"{policy}.traces.jsonl"],
            capsys,
        )
        assert status == 0, err
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "threshold,speedup,score,S_1,S_2,S_3" and len(lines) == 12
        assert (w / "curves" / f"{policy}.manifest.json").exists()
    trace = json.loads(open(w / "curves" / "lte.traces.jsonl").readline())
    assert set(trace) == {"id", "exit", "layers_ee", "layers_mm", "pred", "conf", "correct"}

    status, out, _ = run(["conflict", "--model", w / "run", "--batch-size", 8], capsys)
    assert status == 0
    reports = json.loads(out)
    assert [r["layer"] for r in reports] == [1, 2]


def test_multi_model_run_layout(workspace, capsys):
    w = workspace
    status, _, _ = run(["train", "--config", w / "train.json", "--regime", "mm", "--out", w / "mm"], capsys)
    assert status == 0
    names = {p.name for p in (w / "mm").iterdir()}
    assert {"model_L1.mxex", "model_L2.mxex", "model_L3.mxex", "train_log_L3.jsonl"} <= names
    status, out, _ = run(
        ["curve", "--model", w / "mm", "--policy", "confidence", "--data", w / "data/validation.jsonl", "--out", w / "mm.csv"],
        capsys,
    )
    assert status == 0 and json.loads(out)["mode"] == "mm"
    status, _, err = run(["conflict", "--model", w / "mm", "--batch-size", 4], capsys)
    assert status == STATUS["config"]


def test_manifest_rerun_is_bit_exact(workspace, capsys):
    w = workspace
    assert run(["train", "--config", w / "train.json", "--regime", "ee", "--out", w / "a"], capsys)[0] == 0
    assert run(["train", "--config", w / "a" / "manifest.json", "--out", w / "b"], capsys)[0] == 0
    assert _files(w / "a") == _files(w / "b")
    assert run(["gen-data", "--spec", w / "data" / "manifest.json", "--out", w / "data2"], capsys)[0] == 0
    assert _files(w / "data") == _files(w / "data2")


def test_single_exit_sweet_checkpoint_equals_early_exit(workspace, capsys):
    w = workspace
    cfg = json.loads((w / "train.json").read_text())
    cfg["model"].update(n_layers=2, exit_layers=[2])
    (w / "m1.json").write_text(json.dumps(cfg))
    for regime in ("ee", "sweet", "mm"):
        assert run(["train", "--config", w / "m1.json", "--regime", regime, "--out", w / regime], capsys)[0] == 0
    ee = (w / "ee" / "model.mxex").read_bytes()
    assert (w / "sweet" / "model.mxex").read_bytes() == ee
    assert (w / "mm" / "model_L2.mxex").read_bytes() == ee


def test_compare(workspace, capsys):
    w = workspace
    cfg = json.loads((w / "train.json").read_text())
    cfg["policies"] = ["confidence"]
    (w / "cmp.json").write_text(json.dumps(cfg))
    status, out, err = run(["compare", "--configs", w / "cmp.json", "--seeds", "1,2", "--out", w / "cmp"], capsys)
    assert status == 0, err
    rows = (w / "cmp" / "comparison.csv").read_text().splitlines()
    assert rows[0] == "regime,exit,seed,score" and len(rows) == 1 + 2 * 9
    assert (w / "cmp" / "curve_sweet_confidence_seed2.csv").exists()
    assert json.loads((w / "cmp" / "manifest.json").read_text())["seeds"] == {"seeds": [1, 2]}


@pytest.mark.parametrize(
    "argv,kind",
    [
        (["train", "--config", "x.json", "--bogus"], "usage"),
        (["frobnicate"], "usage"),
        (["train", "--config", "/nonexistent.json", "--out", "o"], "missing_file"),
        (["compare", "--configs", "cmp.json", "--seeds", ",", "--out", "o"], "usage"),
    ],
)
def test_error_statuses(tmp_path, capsys, monkeypatch, argv, kind):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cmp.json").write_text(json.dumps({"model": {}, "data": {"train": "t.jsonl", "validation": "v.jsonl"}}))
    (tmp_path / "t.jsonl").write_text('{"text": "a", "label": "x"}\n')
    (tmp_path / "v.jsonl").write_text('{"text": "a", "label": "x"}\n')
    status, _, err = run(argv, capsys)
    body = json.loads(err)
    assert status == STATUS[kind] and body["error"] == kind and body["status"] == status


def test_config_and_data_errors_are_distinct(workspace, capsys):
    w = workspace
    bad = json.loads((w / "train.json").read_text())
    bad["model"]["exit_layers"] = [2, 1]
    (w / "bad.json").write_text(json.dumps(bad))
    status, _, err = run(["train", "--config", w / "bad.json", "--out", w / "o"], capsys)
    assert status == STATUS["config"] and json.loads(err)["violations"]

    (w / "broken.jsonl").write_text('{"text": "a", "label": "x"}\nnot json\n')
    bad["model"]["exit_layers"] = [1, 2, 3]
    bad["data"]["train"] = str(w / "broken.jsonl")
    (w / "bad2.json").write_text(json.dumps(bad))
    status, _, err = run(["train", "--config", w / "bad2.json", "--out", w / "o"], capsys)
    assert status == STATUS["data_format"] and json.loads(err)["line"] == 2
    assert len(set(STATUS.values())) == len(STATUS)


def test_version_string():
    assert version_string().startswith("v0.1.0")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sweetexit", "eval", "--model", str(tmp_path / "none"), "--data", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == STATUS["missing_file"]
    assert json.loads(proc.stderr)["error"] == "missing_file"


def test_toy_end_to_end_under_five_minutes(tmp_path, capsys):
    start = time.perf_counter()
    (tmp_path / "spec.json").write_text(json.dumps({"size": 2000, "validation_size": 500, "seed": 0}))
    assert run(["gen-data", "--spec", tmp_path / "spec.json", "--out", tmp_path / "data"], capsys)[0] == 0
    cfg = {"model": {}, "training": {}, "data": {"train": "data/train.jsonl", "validation": "data/validation.jsonl"}}
    (tmp_path / "toy.json").write_text(json.dumps(cfg))
    assert run(["train", "--config", tmp_path / "toy.json", "--regime", "sweet", "--out", tmp_path / "run"], capsys)[0] == 0
    status, out, _ = run(
        ["curve", "--model", tmp_path / "run", "--policy", "confidence", "--data", tmp_path / "data/validation.jsonl",
         "--out", tmp_path / "curve.csv"],
        capsys,
    )
    elapsed = time.perf_counter() - start
    assert status == 0 and elapsed < 300
    assert np.mean([p["score"] for p in json.loads(out)["points"]]) > 0.6
