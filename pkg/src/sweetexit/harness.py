"""Speed-accuracy evaluation: threshold sweeps, speedup ratios, interpolation, regime comparison."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, subsample
from .errors import TrainingDiverged
from .exits import (
    CONFIDENCE,
    LEARN_TO_EXIT,
    ExitPolicy,
    ExitTrace,
    calibrate_temperature,
    cascade_gates,
    cascade_scores,
    cascade_temperatures,
    early_exit_scores,
    exit_logits,
    train_lte_gates,
    traces_from_scores,
)
from .model import Model, ModelConfig, load_checkpoint
from .training import Regime, RegimeConfig, train

log = logging.getLogger(__name__)

N_THRESHOLDS = 11
EE, MM = "ee", "mm"


def threshold_grid(n_classes: int) -> np.ndarray:
    """Eleven thresholds evenly spaced strictly inside (1/n_classes, 1)."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    lo, hi = 1.0 / n_classes, 1.0
    return lo + np.arange(1, N_THRESHOLDS + 1) * (hi - lo) / (N_THRESHOLDS + 1)


def exit_counts(traces: Sequence[ExitTrace], n_exits: int) -> np.ndarray:
    counts = np.zeros(n_exits, dtype=np.int64)
    for t in traces:
        counts[t.exit - 1] += 1
    return counts


def speedup_from_counts(counts, exit_layers, mode: str = EE) -> float:
    """``sum_i S_i * cost_i / (L_M * sum_i S_i)``; cost is ``L_i`` (EE) or ``L_1 + ... + L_i`` (MM)."""
    counts = np.asarray(counts, dtype=np.float64)
    layers = np.asarray(exit_layers, dtype=np.float64)
    if mode == EE:
        cost = layers
    elif mode == MM:
        cost = np.cumsum(layers)
    else:
        raise ValueError(f"unknown accounting mode {mode!r}")
    if counts.sum() == 0:
        raise ValueError("no instances")
    return float(np.dot(counts, cost) / (layers[-1] * counts.sum()))


def speedup_ratio(traces: Sequence[ExitTrace], exit_layers, mode: str = EE) -> float:
    if len(traces) == 0:
        raise ValueError("speedup of an empty trace set")
    return speedup_from_counts(exit_counts(traces, len(exit_layers)), exit_layers, mode)


def fixed_ratio_targets(n_layers: int, mode: str = EE) -> List[float]:
    targets = [1.0 / n_layers, 0.25, 0.5, 0.75, 1.0]
    if mode == MM:
        targets += [1.375, 1.75]
    return targets


def interpolate_at(points, targets) -> List[Optional[float]]:
    """Linear interpolation of score at each target speedup; ``None`` outside the observed range.

    ``points`` are ``(speedup, score)`` pairs or :class:`CurvePoint`.
    """
    xy = sorted(((p.speedup, p.score) if isinstance(p, CurvePoint) else tuple(p)) for p in points)
    xs = np.array([x for x, _ in xy])
    ys = np.array([y for _, y in xy])
    out = []
    for t in targets:
        if len(xs) == 0 or t < xs[0] or t > xs[-1]:
            out.append(None)
            continue
        exact = np.nonzero(xs == t)[0]
        if exact.size:
            out.append(float(ys[exact[0]]))
            continue
        k = int(np.searchsorted(xs, t))
        x0, x1, y0, y1 = xs[k - 1], xs[k], ys[k - 1], ys[k]
        out.append(float(y0 + (y1 - y0) * (t - x0) / (x1 - x0)))
    return out


# ---------------------------------------------------------------------------
# metrics


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels))


def matthews_corrcoef(preds, labels) -> float:
    """Binary Matthews correlation; 0.0 when any confusion-matrix margin is empty."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if set(np.unique(preds)) - {0, 1} or set(np.unique(labels)) - {0, 1}:
        raise ValueError("Matthews correlation is implemented for binary labels only")
    tp = float(np.sum((preds == 1) & (labels == 1)))
    tn = float(np.sum((preds == 0) & (labels == 0)))
    fp = float(np.sum((preds == 1) & (labels == 0)))
    fn = float(np.sum((preds == 0) & (labels == 1)))
    denom = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if denom == 0 else float((tp * tn - fp * fn) / denom)


METRICS = {"accuracy": accuracy, "matthews": matthews_corrcoef}


def score(metric: str, preds, labels) -> float:
    try:
        fn = METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None
    return fn(preds, labels)


def evaluate_classifier(model, exit_index: int, dataset: Dataset, metric: str = "accuracy") -> float:
    """Score of exit ``exit_index`` when every instance is forced through it."""
    if not isinstance(model, Model):
        model = load_checkpoint(model)
    if not 1 <= exit_index <= model.topology.n_exits:
        raise IndexError(f"exit index {exit_index} outside 1..{model.topology.n_exits}")
    if metric == "matthews" and dataset.n_classes > 2:
        raise ValueError("Matthews correlation needs a binary task")
    logits, _ = exit_logits(model, dataset)
    return score(metric, logits[exit_index - 1].argmax(axis=1), dataset.labels)


# ---------------------------------------------------------------------------
# curves


@dataclass
class CurvePoint:
    threshold: float
    speedup: float
    score: float
    counts: List[int]


@dataclass
class CurveSet:
    regime: str
    policy: str
    mode: str
    exit_layers: List[int]
    points: List[CurvePoint]
    interpolated: Dict[float, Optional[float]] = field(default_factory=dict)

    def to_dict(self):
        return {
            "regime": self.regime,
            "policy": self.policy,
            "mode": self.mode,
            "exit_layers": list(self.exit_layers),
            "points": [
                {"threshold": p.threshold, "speedup": p.speedup, "score": p.score, "counts": list(p.counts)}
                for p in self.points
            ],
            "interpolated": [{"speedup": k, "score": v} for k, v in self.interpolated.items()],
        }


def curve_from_scores(scores, preds, labels, exit_layers, thresholds, mode, metric="accuracy", regime="", policy=CONFIDENCE) -> CurveSet:
    points = []
    for t in thresholds:
        traces = traces_from_scores(scores, preds, exit_layers, t, labels)
        counts = exit_counts(traces, len(exit_layers))
        points.append(
            CurvePoint(
                threshold=float(t),
                speedup=speedup_from_counts(counts, exit_layers, mode),
                score=score(metric, [tr.pred for tr in traces], labels),
                counts=[int(c) for c in counts],
            )
        )
    curve = CurveSet(regime, policy, mode, list(exit_layers), points)
    targets = fixed_ratio_targets(exit_layers[-1], mode)
    curve.interpolated = dict(zip(targets, interpolate_at(points, targets)))
    return curve


def model_curve(model: Model, dataset: Dataset, policy: ExitPolicy, metric="accuracy", regime="") -> CurveSet:
    scores, preds = early_exit_scores(model, dataset, policy)
    return curve_from_scores(
        scores, preds, dataset.labels, model.topology.exit_layers,
        threshold_grid(dataset.n_classes), EE, metric, regime, policy.kind,
    )


def cascade_curve(models: Sequence[Model], dataset: Dataset, policy: ExitPolicy, metric="accuracy", regime=MM) -> CurveSet:
    scores, preds = cascade_scores(models, dataset, policy)
    exits = [m.topology.n_layers for m in models]
    return curve_from_scores(
        scores, preds, dataset.labels, exits, threshold_grid(dataset.n_classes), MM, metric, regime, policy.kind,
    )


def write_curve_csv(path, curve: CurveSet):
    m = len(curve.exit_layers)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "speedup", "score"] + [f"S_{i}" for i in range(1, m + 1)])
        for p in curve.points:
            w.writerow([repr(p.threshold), repr(p.speedup), repr(p.score)] + list(p.counts))


def build_policy(kind: str, models: Sequence[Model], train_set: Dataset, calib_set: Optional[Dataset], cascade: bool) -> ExitPolicy:
    """Fit temperatures (confidence) or gates (learn-to-exit) for a model or cascade."""
    if kind == CONFIDENCE:
        temps = None
        if calib_set is not None:
            temps = cascade_temperatures(models, calib_set) if cascade else calibrate_temperature(models[0], calib_set)
        return ExitPolicy(CONFIDENCE, 0.5, temperatures=temps)
    if kind == LEARN_TO_EXIT:
        gates = cascade_gates(models, train_set) if cascade else train_lte_gates(models[0], train_set)
        return ExitPolicy(LEARN_TO_EXIT, 0.5, gates=gates)
    raise ValueError(f"unknown policy {kind!r}")


# ---------------------------------------------------------------------------
# regime comparison


@dataclass
class CompareConfig:
    model: ModelConfig
    training: RegimeConfig
    regimes: List[str] = field(default_factory=lambda: [EE, MM, "sweet"])
    policies: List[str] = field(default_factory=lambda: [CONFIDENCE])
    metric: str = "accuracy"
    train_sizes: Optional[List[int]] = None
    calibrate: bool = True
    align_init: bool = False
    max_reruns: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        training = RegimeConfig.from_dict(d.pop("training", {}))
        return cls(model=model, training=training, **d)

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "regimes": list(self.regimes),
            "policies": list(self.policies),
            "metric": self.metric,
            "train_sizes": self.train_sizes,
            "calibrate": self.calibrate,
            "align_init": self.align_init,
            "max_reruns": self.max_reruns,
        }


@dataclass
class RunRecord:
    regime: str
    seed: int
    train_size: Optional[int]
    exit_scores: List[float]
    curves: List[CurveSet]
    diverged: List[dict] = field(default_factory=list)
    run_seed: Optional[int] = None


@dataclass
class Comparison:
    runs: List[RunRecord]
    config: CompareConfig

    def rows(self):
        """``(regime, exit, seed, score, train_size)`` per trained classifier."""
        for r in self.runs:
            for i, s in enumerate(r.exit_scores, start=1):
                yield r.regime, i, r.seed, s, r.train_size

    def summary(self):
        """Mean and population standard deviation over seeds per (train_size, regime, exit)."""
        groups: Dict[tuple, List[float]] = {}
        for regime, exit_index, _, s, size in self.rows():
            groups.setdefault((size, regime, exit_index), []).append(s)
        return [
            {"train_size": k[0], "regime": k[1], "exit": k[2], "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
            for k, v in groups.items()
        ]

    def mean_score(self, regime: str, exit_index: int, train_size=None) -> float:
        for row in self.summary():
            if row["regime"] == regime and row["exit"] == exit_index and row["train_size"] == train_size:
                return row["mean"]
        raise KeyError((regime, exit_index, train_size))

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "rows": [
                {"regime": g, "exit": i, "seed": s, "score": v, "train_size": n} for g, i, s, v, n in self.rows()
            ],
            "summary": self.summary(),
            "diverged": [d for r in self.runs for d in r.diverged],
            "curves": [
                dict(c.to_dict(), seed=r.seed, train_size=r.train_size) for r in self.runs for c in r.curves
            ],
        }

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sizes = sorted({r.train_size for r in self.runs}, key=lambda x: -1 if x is None else x)
        for size in sizes:
            suffix = "" if size is None else f"_n{size}"
            with open(out / f"comparison{suffix}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["regime", "exit", "seed", "score"])
                for regime, i, seed, s, n in self.rows():
                    if n == size:
                        w.writerow([regime, i, seed, repr(s)])
        for r in self.runs:
            suffix = "" if r.train_size is None else f"_n{r.train_size}"
            for c in r.curves:
                write_curve_csv(out / f"curve_{r.regime}_{c.policy}_seed{r.seed}{suffix}.csv", c)
        with open(out / "summary.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _train_scores(cfg: CompareConfig, regime: str, seed: int, train_set: Dataset, validation: Dataset):
    model_cfg = ModelConfig.from_dict(dict(cfg.model.to_dict(), init_seed=seed))
    reg = RegimeConfig.from_dict(dict(cfg.training.to_dict(), regime=regime, seed=seed))
    result = train(reg, model_cfg, train_set, align_init=cfg.align_init)
    cascade = result.regime is Regime.MULTI_MODEL
    if cascade:
        exit_scores = [evaluate_classifier(m, 1, validation, cfg.metric) for m in result.models]
    else:
        exit_scores = [
            evaluate_classifier(result.model, i, validation, cfg.metric)
            for i in range(1, result.model.topology.n_exits + 1)
        ]
    curves = []
    for kind in cfg.policies:
        policy = build_policy(kind, result.models, train_set, validation if cfg.calibrate else None, cascade)
        if cascade:
            curves.append(cascade_curve(result.models, validation, policy, cfg.metric, regime))
        else:
            curves.append(model_curve(result.model, validation, policy, cfg.metric, regime))
    return exit_scores, curves


def compare_regimes(cfg: CompareConfig, train_set: Dataset, validation: Dataset, seeds: Sequence[int]) -> Comparison:
    """Train every regime for every seed (and training-set size) on shared subsets and score them.

    A run whose loss diverges is recorded and retried with a derived seed up
    to ``max_reruns`` times; only the rerun's scores enter the tables.
    """
    cfg.model.validate()
    cfg.training.validate()
    runs = []
    sizes = cfg.train_sizes or [None]
    for size in sizes:
        for seed in seeds:
            subset = train_set if size is None else subsample(train_set, size, seed)
            for regime in cfg.regimes:
                diverged = []
                run_seed = seed
                for attempt in range(cfg.max_reruns + 1):
                    run_seed = seed if attempt == 0 else seed + 1000 * attempt
                    try:
                        exit_scores, curves = _train_scores(cfg, regime, run_seed, subset, validation)
                        break
                    except TrainingDiverged as exc:
                        log.warning("regime %s seed %s diverged at step %s", regime, run_seed, exc.step)
                        diverged.append({"regime": regime, "seed": seed, "run_seed": run_seed, "step": exc.step, "train_size": size})
                else:
                    runs.append(RunRecord(regime, seed, size, [], [], diverged, run_seed))
                    continue
                runs.append(RunRecord(regime, seed, size, exit_scores, curves, diverged, run_seed))
    return Comparison(runs, cfg)
