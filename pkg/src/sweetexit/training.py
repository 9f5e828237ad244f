"""Fine-tuning under the Early-Exit, SWEET and Multi-Model regimes."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import GradientMap, Tape, Tensor
from .errors import ConfigError, TrainingDiverged
from .model import Batch, ExitTopology, Model, ModelConfig, build_model, forward_all_exits
from .seeding import stream


class Regime(str, enum.Enum):
    EARLY_EXIT = "ee"
    MULTI_MODEL = "mm"
    SWEET = "sweet"

    @classmethod
    def parse(cls, value) -> "Regime":
        if isinstance(value, Regime):
            return value
        aliases = {"earlyexit": "ee", "early_exit": "ee", "multimodel": "mm", "multi_model": "mm"}
        key = str(value).lower().replace("-", "_")
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown regime {value!r} (expected ee, mm or sweet)") from None


@dataclass
class RegimeConfig:
    regime: Regime = Regime.EARLY_EXIT
    learning_rate: float = 3e-3
    batch_size: int = 16
    epochs: int = 2
    seed: int = 0
    warmup_steps: int = 0
    weight_decay: float = 0.0
    max_grad_norm: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.regime = Regime.parse(self.regime)

    def validate(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.warmup_steps < 0:
            problems.append("warmup_steps must be >= 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append("max_steps must be >= 1 when set")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            problems.append("max_grad_norm must be positive when set")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["regime"] = self.regime.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown regime config key {k!r}" for k in sorted(unknown)])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses and gradients


def loss_early_exit(exit_logits: Sequence[Tensor], labels) -> Tensor:
    """Unweighted sum of the per-exit mean cross-entropies."""
    if not exit_logits:
        raise ValueError("need at least one exit")
    return ag.sum_losses([ag.cross_entropy(z, labels) for z in exit_logits])


def backward_sweet(exit_logits: Sequence[Tensor], labels, topology: ExitTopology, wrt=None) -> GradientMap:
    """Accumulated gradient of all exit losses on a boundary-gated graph.

    ``exit_logits`` must come from ``forward_all_exits(..., gate_boundaries=True)``
    so each loss stops at the previous exit's layer. Losses are back-propagated
    one at a time in exit order into a single map.
    """
    if len(exit_logits) != topology.n_exits:
        raise ValueError(f"{len(exit_logits)} logit sets for a {topology.n_exits}-exit topology")
    grads: GradientMap = {}
    for z in exit_logits:
        ag.backward(ag.cross_entropy(z, labels), grads)
    if wrt is not None:
        for t in wrt:
            grads.setdefault(t, np.zeros_like(t.data))
    return grads


def per_loss_gradients(model: Model, batch: Batch, labels, gated: bool):
    """Separate gradient maps for every exit loss from one shared forward pass."""
    with Tape():
        logits, _ = forward_all_exits(model, batch, gate_boundaries=gated)
        losses = [ag.cross_entropy(z, labels) for z in logits]
        return [ag.backward(l, wrt=model.params.tensors()) for l in losses]


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """AdamW with decoupled weight decay; biases and layernorm gains are not decayed."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, grads: GradientMap, lr: float):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and p.ndim > 1:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads: GradientMap, state: AdamW, lr_t: float):
    """Functional alias: one AdamW update of ``params`` held by ``state``."""
    if list(params) != state.params:
        raise ValueError("optimizer state was created for different parameters")
    state.step(grads, lr_t)
    return params, state


def linear_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    """Learning rate for 0-based ``step``: linear warmup then linear decay to 0 at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return base_lr * max(0.0, 1.0 - (step - warmup_steps) / span)


def clip_by_global_norm(grads: GradientMap, max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * factor


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepRecord:
    step: int
    exit_losses: List[float]
    lr: float
    regime: str

    def to_json(self):
        return json.dumps(
            {"step": self.step, "exit-losses": self.exit_losses, "lr": self.lr, "regime": self.regime},
            sort_keys=True,
        )


@dataclass
class TrainResult:
    regime: Regime
    models: List[Model]
    logs: List[List[StepRecord]]

    @property
    def model(self) -> Model:
        return self.models[-1]


def batch_order(n: int, batch_size: int, seed: int, epoch: int):
    order = stream(seed, "shuffle", epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def total_steps(regime: RegimeConfig, n: int) -> int:
    total = regime.epochs * steps_per_epoch(n, regime.batch_size)
    return total if regime.max_steps is None else min(total, regime.max_steps)


def train_model(
    model: Model,
    regime: RegimeConfig,
    dataset,
    sweet: bool,
    on_step: Optional[Callable[[int, Model], None]] = None,
) -> List[StepRecord]:
    """Train ``model`` in place on the summed exit loss (gated if ``sweet``)."""
    regime.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    opt = AdamW(
        model.params.tensors(),
        regime.beta1,
        regime.beta2,
        regime.adam_eps,
        regime.weight_decay,
    )
    total = total_steps(regime, len(dataset))
    log = []
    step = 0
    for epoch in range(regime.epochs):
        for idx in batch_order(len(dataset), regime.batch_size, regime.seed, epoch):
            if step >= total:
                break
            batch, labels = dataset.batch(idx)
            with Tape():
                logits, _ = forward_all_exits(model, batch, gate_boundaries=sweet)
                losses = [ag.cross_entropy(z, labels) for z in logits]
                values = [float(l.data) for l in losses]
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(step, values)
                if sweet:
                    grads = backward_sweet(logits, labels, model.topology)
                else:
                    grads = ag.backward(ag.sum_losses(losses))
            if regime.max_grad_norm is not None:
                clip_by_global_norm(grads, regime.max_grad_norm)
            lr = linear_lr(regime.learning_rate, step, total, regime.warmup_steps)
            opt.step(grads, lr)
            log.append(StepRecord(step, values, lr, regime.regime.value))
            step += 1
            if on_step is not None:
                on_step(step, model)
    return log


def multi_model_seed(init_seed: int, depth: int, full_depth: int) -> int:
    """Init seed of the depth-``depth`` sub-model; the full-depth one keeps ``init_seed``."""
    return init_seed if depth == full_depth else init_seed ^ depth


def train(
    regime: RegimeConfig,
    model_config: ModelConfig,
    dataset,
    on_step: Optional[Callable[[int, Model], None]] = None,
    align_init: bool = False,
) -> TrainResult:
    """Train under ``regime``.

    Early-Exit and SWEET produce one multi-exit model. Multi-Model trains one
    single-exit model per exit depth, smallest first, each initialised from
    ``init_seed ^ depth`` (the full-depth model keeps ``init_seed``, so with a
    single exit all regimes coincide) unless ``align_init`` keeps the shared
    seed for every depth.
    ``on_step(step, model)`` is called after every optimiser step.
    """
    regime.validate()
    model_config.validate()
    if regime.regime is Regime.MULTI_MODEL:
        models, logs = [], []
        for depth in model_config.exit_layers:
            seed = model_config.init_seed if align_init else multi_model_seed(model_config.init_seed, depth, model_config.n_layers)
            sub = build_model(model_config.truncated(depth, init_seed=seed))
            logs.append(train_model(sub, regime, dataset, sweet=False, on_step=on_step))
            models.append(sub)
        return TrainResult(regime.regime, models, logs)
    model = build_model(model_config)
    log = train_model(model, regime, dataset, sweet=regime.regime is Regime.SWEET, on_step=on_step)
    return TrainResult(regime.regime, [model], [log])


def write_log(path, records: Sequence[StepRecord]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
