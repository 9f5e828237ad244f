"""Gradient alignment between exit classifiers on shared layers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .model import Batch, Model, forward_all_exits

DEFAULT_MATRIX = "ffn.out.weight"


class UndefinedSimilarity(ValueError):
    """Every row pair had a zero-norm side, so no cosine is defined."""


def row_cosine_details(a, b) -> Tuple[float, int]:
    """Mean cosine similarity over corresponding rows, and the number of rows skipped.

    A row is skipped when either side has zero norm.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise UndefinedSimilarity("all rows have zero norm")
    cos = np.sum(a[keep] * b[keep], axis=1) / (na[keep] * nb[keep])
    return float(np.mean(np.clip(cos, -1.0, 1.0))), int((~keep).sum())


def row_cosine_similarity(a, b) -> float:
    return row_cosine_details(a, b)[0]


def probed_layers(model: Model) -> List[int]:
    """Layers immediately before every exit but the last."""
    return list(model.topology.exit_layers[:-1])


def reaching_classifiers(model: Model, layer: int) -> List[int]:
    """Exits whose untruncated loss depends on ``layer``."""
    return [i for i, l in enumerate(model.topology.exit_layers, start=1) if l >= layer]


def probe_gradients(model: Model, batch: Batch, labels, matrix: str = DEFAULT_MATRIX) -> Dict[int, Dict[int, np.ndarray]]:
    """Per-classifier gradients of each probed layer's ``matrix``.

    One forward pass is shared; each exit's cross-entropy is then
    back-propagated on its own. Returns ``{layer: {exit: gradient}}`` with
    gradients in the stored (in, out) orientation.
    """
    layers = probed_layers(model)
    targets = {layer: model.params[f"layer.{layer}.{matrix}"] for layer in layers}
    out: Dict[int, Dict[int, np.ndarray]] = {layer: {} for layer in layers}
    with Tape():
        logits, _ = forward_all_exits(model, batch)
        losses = [ag.cross_entropy(z, labels) for z in logits]
        for i, loss in enumerate(losses, start=1):
            grads = ag.backward(loss)
            for layer, w in targets.items():
                if i in reaching_classifiers(model, layer):
                    out[layer][i] = grads[w]
    return out


def joint_probe_gradient(model: Model, batch: Batch, labels, matrix: str = DEFAULT_MATRIX) -> Dict[int, np.ndarray]:
    """Gradient of the summed exit loss for each probed matrix."""
    with Tape():
        logits, _ = forward_all_exits(model, batch)
        grads = ag.backward(ag.sum_losses([ag.cross_entropy(z, labels) for z in logits]))
    return {layer: grads[model.params[f"layer.{layer}.{matrix}"]] for layer in probed_layers(model)}


@dataclass
class ConflictReport:
    layer: int
    matrix: str
    pairs: List[dict] = field(default_factory=list)
    skipped_rows: int = 0

    def sim(self, i: int, j: int) -> float:
        if i == j:
            return 1.0
        a, b = min(i, j), max(i, j)
        for p in self.pairs:
            if p["i"] == a and p["j"] == b:
                return p["sim"]
        raise KeyError((i, j))

    def to_dict(self):
        return {"layer": self.layer, "matrix": self.matrix, "pairs": self.pairs, "skipped_rows": self.skipped_rows}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def conflict_reports(model: Model, batch: Batch, labels, matrix: str = DEFAULT_MATRIX) -> List[ConflictReport]:
    """Pairwise row-cosine similarity of classifier gradients at every probed layer.

    Rows follow the (out, in) weight convention, one row per output unit.
    """
    grads = probe_gradients(model, batch, labels, matrix)
    reports = []
    for layer, per_exit in grads.items():
        report = ConflictReport(layer, matrix)
        exits = sorted(per_exit)
        for x, i in enumerate(exits):
            for j in exits[x + 1 :]:
                try:
                    sim, skipped = row_cosine_details(per_exit[i].T, per_exit[j].T)
                except UndefinedSimilarity:
                    sim, skipped = None, per_exit[i].shape[1]
                report.pairs.append({"i": i, "j": j, "sim": sim})
                report.skipped_rows += skipped
        reports.append(report)
    return reports
