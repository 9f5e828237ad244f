"""Exit policies: calibrated confidence thresholds, learned exit gates, cascades."""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, _sigmoid, softmax_array
from .model import Model, forward_all_exits, forward_until, pooled
from .training import AdamW

TEMPERATURE_GRID = tuple(0.25 * k for k in range(1, 17))

_SCORE_LO = np.nextafter(0.0, 1.0)
_SCORE_HI = np.nextafter(1.0, 0.0)

CONFIDENCE = "confidence"
LEARN_TO_EXIT = "lte"


@dataclass
class Gate:
    """Logistic exit gate on an exit's pooled hidden state."""

    weight: np.ndarray
    bias: float

    def score(self, hidden) -> np.ndarray:
        z = np.asarray(hidden) @ self.weight + self.bias
        # saturated logistics round to exactly 0 or 1; keep scores in the open interval
        return np.clip(_sigmoid(z), _SCORE_LO, _SCORE_HI)

    def to_dict(self):
        return {"weight": self.weight.tolist(), "bias": float(self.bias)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weight"], dtype=np.float64), float(d["bias"]))


@dataclass
class ExitPolicy:
    kind: str = CONFIDENCE
    threshold: float = 0.9
    temperatures: Optional[Sequence[float]] = None
    gates: Optional[Sequence[Gate]] = None

    def __post_init__(self):
        if self.kind not in (CONFIDENCE, LEARN_TO_EXIT):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == LEARN_TO_EXIT and not self.gates:
            raise ValueError("learn-to-exit policy needs gates")
        if self.temperatures is not None and any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")

    def with_threshold(self, t: float) -> "ExitPolicy":
        return ExitPolicy(self.kind, t, self.temperatures, self.gates)

    def temperature(self, exit_index: int) -> float:
        return 1.0 if self.temperatures is None else float(self.temperatures[exit_index - 1])

    def score(self, exit_index: int, logits, hidden) -> np.ndarray:
        """Exit score(s) for 1-based ``exit_index``; works on one row or a batch."""
        if self.kind == CONFIDENCE:
            probs = softmax_array(np.asarray(logits) / self.temperature(exit_index), axis=-1)
            return probs.max(axis=-1)
        return self.gates[exit_index - 1].score(hidden)


@dataclass
class ExitTrace:
    instance_id: int
    exit: int
    layers_ee: int
    layers_mm: int
    pred: int
    conf: float
    correct: Optional[bool] = None

    def to_dict(self):
        return {
            "id": int(self.instance_id),
            "exit": int(self.exit),
            "layers_ee": int(self.layers_ee),
            "layers_mm": int(self.layers_mm),
            "pred": int(self.pred),
            "conf": float(self.conf),
            "correct": None if self.correct is None else bool(self.correct),
        }


def write_traces(path, traces: Sequence[ExitTrace]):
    with open(path, "w") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def _trace(instance_id, exit_index, exit_layers, pred, conf, label):
    return ExitTrace(
        instance_id=instance_id,
        exit=exit_index,
        layers_ee=exit_layers[exit_index - 1],
        layers_mm=int(sum(exit_layers[:exit_index])),
        pred=int(pred),
        conf=float(conf),
        correct=None if label is None else bool(int(pred) == int(label)),
    )


# ---------------------------------------------------------------------------
# temperature scaling


def scaled_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = np.asarray(logits) / temperature
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def fit_temperature(logits, labels, grid=TEMPERATURE_GRID) -> float:
    """Grid temperature with the lowest mean NLL; ties go to the value nearest 1.0."""
    labels = np.asarray(labels, dtype=np.int64)
    scored = [(scaled_nll(logits, labels, t), abs(t - 1.0), t) for t in grid]
    return min(scored)[2]


def exit_logits(model: Model, dataset, batch_size: int = 256):
    """Per-exit logits and pooled hidden states over a whole dataset (no tape)."""
    logits = [[] for _ in range(model.topology.n_exits)]
    hidden = [[] for _ in range(model.topology.n_exits)]
    for batch, _ in dataset.batches(batch_size):
        z, h = forward_all_exits(model, batch)
        for i, layer in enumerate(model.topology.exit_layers):
            logits[i].append(z[i].data)
            hidden[i].append(pooled(h[layer]).data)
    return [np.concatenate(z) for z in logits], [np.concatenate(h) for h in hidden]


def calibrate_temperature(model: Model, dataset) -> List[float]:
    """One temperature per exit, fitted on ``dataset`` by grid search."""
    if len(dataset) == 0:
        raise ValueError("validation set is empty")
    logits, _ = exit_logits(model, dataset)
    return [fit_temperature(z, dataset.labels) for z in logits]


# ---------------------------------------------------------------------------
# per-instance prediction


def predict_early_exit(model: Model, policy: ExitPolicy, instance, instance_id=0, label=None) -> ExitTrace:
    """Evaluate exits in order, reusing computation, and stop at the first accepting one."""
    state = None
    exits = model.topology.exit_layers
    for i in range(1, len(exits) + 1):
        logits, _, state = forward_until(model, instance, i, state)
        score = float(policy.score(i, logits, state.hidden_at_exit[i]))
        if score >= policy.threshold or i == len(exits):
            return _trace(instance_id, i, exits, np.argmax(logits), score, label)
    raise AssertionError("unreachable")


def predict_cascade(models: Sequence[Model], policy: ExitPolicy, instance, instance_id=0, label=None) -> ExitTrace:
    """Run independent models smallest first; each escalation discards earlier work."""
    exits = tuple(m.topology.n_layers for m in models)
    for i, m in enumerate(models, start=1):
        logits, _, state = forward_until(m, instance, m.topology.n_exits)
        score = float(policy.score(i, logits, state.hidden_at_exit[m.topology.n_exits]))
        if score >= policy.threshold or i == len(models):
            return _trace(instance_id, i, exits, np.argmax(logits), score, label)
    raise AssertionError("unreachable")


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("SWEETEXIT_THREADS", "1")))
    except ValueError:
        return 1


def predict_dataset(predict, dataset, *args) -> List[ExitTrace]:
    """Apply ``predict(*args, instance, id, label)`` to every instance, in order.

    Runs on ``SWEETEXIT_THREADS`` worker threads (default 1); results are
    returned in instance order regardless.
    """

    def one(k):
        return predict(*args, dataset.sequences[k], int(dataset.ids[k]), int(dataset.labels[k]))

    n = eval_threads()
    if n == 1:
        return [one(k) for k in range(len(dataset))]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, range(len(dataset))))


def traces_from_scores(scores, preds, exit_layers, threshold, labels=None, ids=None) -> List[ExitTrace]:
    """Exit decisions from precomputed per-exit scores and predictions.

    ``scores`` and ``preds`` are (n, M). Gives the same traces as running
    :func:`predict_early_exit` per instance, without re-running the model for
    every threshold.
    """
    scores = np.asarray(scores)
    preds = np.asarray(preds)
    n, m = scores.shape
    accept = scores >= threshold
    accept[:, -1] = True
    first = accept.argmax(axis=1)
    out = []
    for k in range(n):
        i = int(first[k])
        out.append(
            _trace(
                k if ids is None else int(ids[k]),
                i + 1,
                exit_layers,
                preds[k, i],
                scores[k, i],
                None if labels is None else labels[k],
            )
        )
    return out


# ---------------------------------------------------------------------------
# learning to exit


def fit_gate(features, targets, steps: int = 300, lr: float = 0.05) -> Gate:
    """Logistic regression of 0/1 ``targets`` on ``features`` by full-batch AdamW."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    w = Tensor(np.zeros((features.shape[1], 1)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = AdamW([w, b])
    x = Tensor(features)
    y = targets[:, None]
    for _ in range(steps):
        with Tape():
            loss = ag.bce_with_logits(x @ w + b, y)
            grads = ag.backward(loss)
        opt.step(grads, lr)
    return Gate(w.data[:, 0].copy(), float(b.data[0]))


def train_lte_gates(model: Model, dataset, steps: int = 300, lr: float = 0.05) -> List[Gate]:
    """One gate per exit predicting whether that exit's prediction is correct.

    The backbone is only read, never updated.
    """
    logits, hidden = exit_logits(model, dataset)
    gates = []
    for i, (z, h) in enumerate(zip(logits, hidden), start=1):
        correct = (z.argmax(axis=1) == dataset.labels).astype(np.float64)
        if correct.min() == correct.max():
            warnings.warn(
                f"exit {i} is {'always' if correct[0] else 'never'} correct on the gate training set",
                RuntimeWarning,
                stacklevel=2,
            )
        gates.append(fit_gate(h, correct, steps, lr))
    return gates


def cascade_gates(models: Sequence[Model], dataset, steps: int = 300, lr: float = 0.05) -> List[Gate]:
    return [train_lte_gates(m, dataset, steps, lr)[-1] for m in models]


def cascade_temperatures(models: Sequence[Model], dataset) -> List[float]:
    return [calibrate_temperature(m, dataset)[-1] for m in models]


def cascade_scores(models: Sequence[Model], dataset, policy: ExitPolicy):
    """(scores, preds) matrices for a cascade, one column per model."""
    scores, preds = [], []
    for i, m in enumerate(models, start=1):
        z, h = exit_logits(m, dataset)
        scores.append(policy.score(i, z[-1], h[-1]))
        preds.append(z[-1].argmax(axis=1))
    return np.stack(scores, axis=1), np.stack(preds, axis=1)


def early_exit_scores(model: Model, dataset, policy: ExitPolicy):
    z, h = exit_logits(model, dataset)
    scores = np.stack([policy.score(i, z[i - 1], h[i - 1]) for i in range(1, len(z) + 1)], axis=1)
    preds = np.stack([x.argmax(axis=1) for x in z], axis=1)
    return scores, preds
