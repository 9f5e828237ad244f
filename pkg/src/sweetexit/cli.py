"""Command-line entry point: ``sweetexit <subcommand> ...``.

Every command writes a manifest (resolved config, seeds, version, timestamp)
beside its outputs. Failures print one JSON object on stderr and exit with a
status that identifies the failure class (see ``STATUS``).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conflict import DEFAULT_MATRIX, conflict_reports
from .data import SyntheticTaskSpec, Vocab, generate_synthetic, load_dataset, subsample, write_jsonl
from .errors import ConfigError, DataFormatError, TrainingDiverged
from .exits import CONFIDENCE, LEARN_TO_EXIT, ExitPolicy, write_traces, traces_from_scores
from .harness import (
    CompareConfig,
    build_policy,
    cascade_curve,
    compare_regimes,
    evaluate_classifier,
    model_curve,
    threshold_grid,
    write_curve_csv,
)
from .exits import calibrate_temperature, cascade_scores, cascade_temperatures, early_exit_scores
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .seeding import stream
from .training import Regime, RegimeConfig, train, write_log

STATUS = {
    "ok": 0,
    "error": 1,
    "usage": 2,
    "missing_file": 3,
    "config": 4,
    "data_format": 5,
    "diverged": 6,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"v{__version__}-{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def read_config(path) -> dict:
    """A config file, or the ``config`` section of a manifest written by an earlier run."""
    d = read_json(path)
    if "manifest_version" in d and "config" in d:
        return d["config"]
    base = Path(path).resolve().parent
    data = d.get("data")
    if isinstance(data, dict):
        for key in ("train", "validation"):
            if data.get(key):
                data[key] = str((base / data[key]).resolve())
    return d


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command, argv, config, seeds, outputs):
    """Write a manifest at ``path``; ``outputs`` are file names in the same directory."""
    path = Path(path)
    out_dir = path.parent
    manifest = {
        "manifest_version": 1,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "version": version_string(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": {name: file_digest(out_dir / name) for name in sorted(outputs)},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def manifest_beside(output) -> Path:
    output = Path(output)
    return output.with_name(output.stem + ".manifest.json")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_data_section(data: dict, max_seq_len: int):
    fmt = data.get("format", "jsonl")
    train_set = load_dataset(data["train"], fmt, max_seq_len=max_seq_len, split="train")
    validation = None
    if data.get("validation"):
        validation = load_dataset(
            data["validation"], fmt, vocab=train_set.vocab, label_names=train_set.label_names,
            max_seq_len=max_seq_len, split="validation",
        )
    return train_set, validation


def load_with_vocab(model_dir: Path, path, fmt, max_seq_len):
    meta = read_json(model_dir / "vocab.json")
    return load_dataset(
        path, fmt, vocab=Vocab.from_json(meta), label_names=meta["labels"], max_seq_len=max_seq_len, split="eval",
    )


class TrainedArtifact:
    """A ``train`` output directory: one multi-exit model or a Multi-Model cascade."""

    def __init__(self, model_dir):
        self.dir = Path(model_dir)
        if not self.dir.is_dir():
            raise FileNotFoundError(str(self.dir))
        self.manifest = read_json(self.dir / "manifest.json")
        self.config = self.manifest["config"]
        self.regime = Regime.parse(self.config["training"]["regime"])
        if self.regime is Regime.MULTI_MODEL:
            depths = self.config["model"]["exit_layers"]
            self.models = [load_checkpoint(self.dir / f"model_L{d}.mxex") for d in depths]
        else:
            self.models = [load_checkpoint(self.dir / "model.mxex")]

    @property
    def cascade(self) -> bool:
        return self.regime is Regime.MULTI_MODEL

    @property
    def max_seq_len(self):
        return self.models[0].config.max_seq_len

    def load(self, path, fmt="jsonl"):
        return load_with_vocab(self.dir, path, fmt, self.max_seq_len)

    def training_data(self):
        data = self.config["data"]
        return self.load(data["train"], data.get("format", "jsonl"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv):
    raw = dict(read_config(args.spec))
    validation_size = int(raw.pop("validation_size", 500))
    spec = SyntheticTaskSpec.from_dict(raw)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_spec = SyntheticTaskSpec.from_dict(dict(spec.to_dict(), split="train"))
    val_spec = SyntheticTaskSpec.from_dict(dict(spec.to_dict(), split="validation", size=validation_size))
    write_jsonl(out / "train.jsonl", generate_synthetic(train_spec))
    write_jsonl(out / "validation.jsonl", generate_synthetic(val_spec))
    config = dict(spec.to_dict(), validation_size=validation_size)
    write_manifest(out / "manifest.json", "gen-data", argv, config, {"seed": spec.seed}, ["train.jsonl", "validation.jsonl"])
    return {"out": str(out), "train": train_spec.size, "validation": validation_size}


def cmd_train(args, argv):
    cfg = read_config(args.config)
    for key in ("model", "data"):
        if key not in cfg:
            raise ConfigError(f"config is missing the {key!r} section")
    training = dict(cfg.get("training", {}))
    if args.regime:
        training["regime"] = args.regime
    regime = RegimeConfig.from_dict(training).validate()
    model_cfg = ModelConfig.from_dict(cfg["model"]).validate()
    data = dict(cfg["data"])
    train_set, _ = load_data_section(data, model_cfg.max_seq_len)
    if len(train_set.vocab) > model_cfg.vocab_size:
        raise ConfigError(f"vocabulary has {len(train_set.vocab)} entries but vocab_size is {model_cfg.vocab_size}")
    if train_set.n_classes != model_cfg.n_classes:
        raise ConfigError(f"data has {train_set.n_classes} classes but n_classes is {model_cfg.n_classes}")
    if data.get("train_size"):
        train_set = subsample(train_set, int(data["train_size"]), regime.seed)

    result = train(regime, model_cfg, train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["vocab.json"]
    write_json(out / "vocab.json", dict(train_set.vocab.to_json(), labels=train_set.label_names))
    if result.regime is Regime.MULTI_MODEL:
        for m, records in zip(result.models, result.logs):
            depth = m.config.n_layers
            save_checkpoint(out / f"model_L{depth}.mxex", m)
            write_log(out / f"train_log_L{depth}.jsonl", records)
            outputs += [f"model_L{depth}.mxex", f"train_log_L{depth}.jsonl"]
    else:
        save_checkpoint(out / "model.mxex", result.model)
        write_log(out / "train_log.jsonl", result.logs[0])
        outputs += ["model.mxex", "train_log.jsonl"]
    resolved = {"model": model_cfg.to_dict(), "training": regime.to_dict(), "data": data}
    write_manifest(out / "manifest.json", "train", argv, resolved, {"init_seed": model_cfg.init_seed, "seed": regime.seed}, outputs)
    return {"out": str(out), "regime": regime.regime.value, "steps": sum(len(l) for l in result.logs)}


def cmd_eval(args, argv):
    art = TrainedArtifact(args.model)
    dataset = art.load(args.data, args.format)
    if art.cascade:
        scores = [evaluate_classifier(m, 1, dataset, args.metric) for m in art.models]
    else:
        m = art.models[0]
        scores = [evaluate_classifier(m, i, dataset, args.metric) for i in range(1, m.topology.n_exits + 1)]
    result = {"regime": art.regime.value, "metric": args.metric, "exit_scores": scores}
    out = Path(args.out) if args.out else art.dir / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, result)
    config = {"model": str(art.dir.resolve()), "data": str(Path(args.data).resolve()), "metric": args.metric}
    write_manifest(manifest_beside(out), "eval", argv, config, art.manifest.get("seeds", {}), [out.name])
    return result


def cmd_calibrate(args, argv):
    art = TrainedArtifact(args.model)
    dataset = art.load(args.data, args.format)
    if art.cascade:
        temps = cascade_temperatures(art.models, dataset)
    else:
        temps = calibrate_temperature(art.models[0], dataset)
    out = Path(args.out) if args.out else art.dir / "temperatures.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {"temperatures": temps})
    config = {"model": str(art.dir.resolve()), "data": str(Path(args.data).resolve())}
    write_manifest(manifest_beside(out), "calibrate", argv, config, art.manifest.get("seeds", {}), [out.name])
    return {"temperatures": temps, "out": str(out)}


def cmd_curve(args, argv):
    art = TrainedArtifact(args.model)
    dataset = art.load(args.data, args.format)
    if args.policy == CONFIDENCE:
        temps = None
        tpath = art.dir / "temperatures.json"
        if tpath.exists():
            temps = read_json(tpath)["temperatures"]
        policy = ExitPolicy(CONFIDENCE, 0.5, temperatures=temps)
    else:
        gate_data = art.load(args.gate_data, args.format) if args.gate_data else art.training_data()
        policy = build_policy(LEARN_TO_EXIT, art.models, gate_data, None, art.cascade)
    if art.cascade:
        curve = cascade_curve(art.models, dataset, policy, args.metric, art.regime.value)
        scores, preds = cascade_scores(art.models, dataset, policy)
        exits = [m.topology.n_layers for m in art.models]
    else:
        curve = model_curve(art.models[0], dataset, policy, args.metric, art.regime.value)
        scores, preds = early_exit_scores(art.models[0], dataset, policy)
        exits = list(art.models[0].topology.exit_layers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out, curve)
    outputs = [out.name]
    summary = out.with_suffix(".json")
    write_json(summary, curve.to_dict())
    outputs.append(summary.name)
    if args.traces:
        tpath = Path(args.traces)
        write_traces(tpath, traces_from_scores(scores, preds, exits, args.trace_threshold, dataset.labels, dataset.ids))
        if tpath.parent.resolve() == out.parent.resolve():
            outputs.append(tpath.name)
    config = {
        "model": str(art.dir.resolve()),
        "policy": args.policy,
        "data": str(Path(args.data).resolve()),
        "metric": args.metric,
        "thresholds": [float(t) for t in threshold_grid(dataset.n_classes)],
        "temperatures": policy.temperatures,
    }
    write_manifest(manifest_beside(out), "curve", argv, config, art.manifest.get("seeds", {}), outputs)
    return curve.to_dict()


def cmd_conflict(args, argv):
    art = TrainedArtifact(args.model)
    if art.cascade:
        raise ConfigError("conflict diagnostics need a multi-exit model, not a Multi-Model cascade")
    model = art.models[0]
    data = art.load(args.data, args.format) if args.data else art.training_data()
    idx = np.sort(stream(args.seed, "conflict-batch").choice(len(data), size=min(args.batch_size, len(data)), replace=False))
    batch, labels = data.batch(idx)
    reports = [r.to_dict() for r in conflict_reports(model, batch, labels, args.matrix)]
    out = Path(args.out) if args.out else art.dir / "conflict.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, reports)
    config = {"model": str(art.dir.resolve()), "batch_size": args.batch_size, "matrix": args.matrix}
    write_manifest(manifest_beside(out), "conflict", argv, config, {"seed": args.seed}, [out.name])
    return reports


def cmd_compare(args, argv):
    raw = read_config(args.configs)
    if "data" not in raw:
        raise ConfigError("compare config is missing the 'data' section")
    data = raw.pop("data")
    cfg = CompareConfig.from_dict(raw)
    train_set, validation = load_data_section(data, cfg.model.max_seq_len)
    if validation is None:
        raise ConfigError("compare needs data.validation")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one integer")
    comparison = compare_regimes(cfg, train_set, validation, seeds)
    out = Path(args.out)
    comparison.write(out)
    outputs = [p.name for p in out.iterdir() if p.name != "manifest.json"]
    write_manifest(out / "manifest.json", "compare", argv, dict(cfg.to_dict(), data=data), {"seeds": seeds}, outputs)
    return {"out": str(out), "summary": comparison.summary()}


def build_parser():
    p = _Parser(prog="sweetexit", description="Multi-exit transformer training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic train/validation split")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fine-tune under one regime")
    t.add_argument("--config", required=True)
    t.add_argument("--regime", choices=["ee", "mm", "sweet"])
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "score every exit on a dataset"), ("calibrate", cmd_calibrate, "fit per-exit temperatures")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
        e.add_argument("--out")
        if name == "eval":
            e.add_argument("--metric", choices=["accuracy", "matthews"], default="accuracy")
        e.set_defaults(fn=fn)

    c = sub.add_parser("curve", help="speed-accuracy curve over the threshold grid")
    c.add_argument("--model", required=True)
    c.add_argument("--policy", choices=[CONFIDENCE, LEARN_TO_EXIT], required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    c.add_argument("--metric", choices=["accuracy", "matthews"], default="accuracy")
    c.add_argument("--gate-data", help="training data for learn-to-exit gates (default: the model's training set)")
    c.add_argument("--traces", help="also dump per-instance exit traces (JSON lines)")
    c.add_argument("--trace-threshold", type=float, default=0.9)
    c.set_defaults(fn=cmd_curve)

    k = sub.add_parser("conflict", help="gradient-conflict report for a multi-exit model")
    k.add_argument("--model", required=True)
    k.add_argument("--batch-size", type=int, default=16)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--matrix", default=DEFAULT_MATRIX)
    k.add_argument("--data")
    k.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    k.add_argument("--out")
    k.set_defaults(fn=cmd_conflict)

    m = sub.add_parser("compare", help="train and compare regimes across seeds")
    m.add_argument("--configs", required=True)
    m.add_argument("--seeds", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_compare)
    return p


def _fail(kind, exc):
    status = STATUS[kind]
    body = {"error": kind, "message": str(exc), "status": status}
    if isinstance(exc, ConfigError):
        body["violations"] = exc.violations
    if isinstance(exc, TrainingDiverged):
        body["step"] = exc.step
    if isinstance(exc, DataFormatError) and exc.line is not None:
        body["line"] = exc.line
    sys.stderr.write(json.dumps(body, sort_keys=True) + "\n")
    return status


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        result = args.fn(args, argv)
    except UsageError as exc:
        return _fail("usage", exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except ConfigError as exc:
        return _fail("config", exc)
    except DataFormatError as exc:
        return _fail("data_format", exc)
    except TrainingDiverged as exc:
        return _fail("diverged", exc)
    except (ValueError, KeyError, IndexError) as exc:
        return _fail("error", exc)
    if result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return STATUS["ok"]


if __name__ == "__main__":
    sys.exit(main())
