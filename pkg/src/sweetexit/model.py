"""Transformer encoder with classifier heads after selected layers.

Blocks are pre-layernorm. Exit head ``i`` is a linear map applied to the
first-token hidden state after layer ``exit_layers[i-1]``. Every parameter
belongs to exactly one segment: embeddings and layers ``1..L_1`` to segment 1,
layers ``L_{i-1}+1..L_i`` to segment ``i``, and head ``i`` to segment ``i``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .seeding import stream, truncated_normal

MAGIC = b"MXEX1"
INIT_STD = 0.02
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 512
    max_seq_len: int = 32
    n_classes: int = 2
    exit_layers: List[int] = field(default_factory=lambda: [1, 2, 4])
    init_seed: int = 0
    layernorm_eps: float = 1e-5

    def validate(self):
        problems = []
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        exits = list(self.exit_layers)
        if not exits:
            problems.append("exit_layers must be nonempty")
        else:
            if any(b <= a for a, b in zip(exits, exits[1:])):
                problems.append(f"exit_layers {exits} not strictly increasing")
            if exits[0] < 1:
                problems.append("exit layers are 1-based")
            if exits[-1] != self.n_layers:
                problems.append(f"last exit layer {exits[-1]} != n_layers {self.n_layers}")
        if self.layernorm_eps <= 0:
            problems.append("layernorm_eps must be positive")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in sorted(unknown)])
        cfg = cls(**d)
        cfg.exit_layers = [int(x) for x in cfg.exit_layers]
        return cfg

    def truncated(self, depth: int, init_seed: Optional[int] = None) -> "ModelConfig":
        """Single-exit config of the first ``depth`` layers."""
        return dataclasses.replace(
            self,
            n_layers=depth,
            exit_layers=[depth],
            init_seed=self.init_seed if init_seed is None else init_seed,
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class ExitTopology:
    """Exit layer positions and the parameter-to-segment rule."""

    def __init__(self, exit_layers):
        self.exit_layers = tuple(int(l) for l in exit_layers)
        self.n_layers = self.exit_layers[-1]

    @property
    def n_exits(self):
        return len(self.exit_layers)

    def segment_of_layer(self, layer: int) -> int:
        if not 1 <= layer <= self.n_layers:
            raise IndexError(f"layer {layer} outside 1..{self.n_layers}")
        for i, boundary in enumerate(self.exit_layers, start=1):
            if layer <= boundary:
                return i
        raise AssertionError("unreachable")

    def segment_of_head(self, head: int) -> int:
        if not 1 <= head <= self.n_exits:
            raise IndexError(f"head {head} outside 1..{self.n_exits}")
        return head

    segment_of_embedding = 1

    def cumulative_cost(self, exit_index: int) -> int:
        """Layers run by a cascade of independent models up to ``exit_index``."""
        return int(np.sum(self.exit_layers[:exit_index]))

    def __eq__(self, other):
        return isinstance(other, ExitTopology) and self.exit_layers == other.exit_layers

    def __repr__(self):
        return f"ExitTopology({list(self.exit_layers)})"


class ParameterStore:
    """Named parameters in a fixed order, each tagged with its segment."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._segments: dict[str, int] = {}

    def add(self, name, value, segment):
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self._segments[name] = segment
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def segment(self, name) -> int:
        return self._segments[name]

    def names_in_segment(self, segment):
        return [n for n in self._params if self._segments[n] == segment]

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), self._segments[name])
        return out

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict):
        for name, value in state.items():
            self._params[name].data = np.array(value, dtype=np.float64)

    def frozen(self):
        """Raw bytes of every parameter, for exact comparisons."""
        return {name: t.data.tobytes() for name, t in self._params.items()}


@dataclass
class Model:
    config: ModelConfig
    params: ParameterStore
    topology: ExitTopology


def _layer_shapes(cfg: ModelConfig):
    d, f = cfg.d_model, cfg.d_ff
    return [
        ("ln1.gain", (d,), "ones"),
        ("ln1.bias", (d,), "zeros"),
        ("attn.q.weight", (d, d), "normal"),
        ("attn.q.bias", (d,), "zeros"),
        ("attn.k.weight", (d, d), "normal"),
        ("attn.k.bias", (d,), "zeros"),
        ("attn.v.weight", (d, d), "normal"),
        ("attn.v.bias", (d,), "zeros"),
        ("attn.out.weight", (d, d), "normal"),
        ("attn.out.bias", (d,), "zeros"),
        ("ln2.gain", (d,), "ones"),
        ("ln2.bias", (d,), "zeros"),
        ("ffn.in.weight", (d, f), "normal"),
        ("ffn.in.bias", (f,), "zeros"),
        ("ffn.out.weight", (f, d), "normal"),
        ("ffn.out.bias", (d,), "zeros"),
    ]


def parameter_layout(cfg: ModelConfig):
    """(name, shape, init kind, segment) for every parameter, in store order."""
    topo = ExitTopology(cfg.exit_layers)
    layout = [
        ("embed.token", (cfg.vocab_size, cfg.d_model), "normal", 1),
        ("embed.position", (cfg.max_seq_len, cfg.d_model), "normal", 1),
    ]
    for layer in range(1, cfg.n_layers + 1):
        seg = topo.segment_of_layer(layer)
        for suffix, shape, kind in _layer_shapes(cfg):
            layout.append((f"layer.{layer}.{suffix}", shape, kind, seg))
    for head in range(1, topo.n_exits + 1):
        layout.append((f"head.{head}.weight", (cfg.d_model, cfg.n_classes), "normal", head))
        layout.append((f"head.{head}.bias", (cfg.n_classes,), "zeros", head))
    return layout


def init_model(config: ModelConfig):
    """Initialise parameters and topology for ``config``.

    Each weight matrix draws from its own stream keyed by ``(init_seed, name)``,
    so two configs that share a seed agree on every parameter they have in
    common. That is what lets a shallow standalone model start from exactly
    the same weights as the first segment of a deeper multi-exit model.
    """
    config.validate()
    store = ParameterStore()
    for name, shape, kind, seg in parameter_layout(config):
        if kind == "normal":
            value = truncated_normal(stream(config.init_seed, "init", name), shape, INIT_STD)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(name, value, seg)
    return store, ExitTopology(config.exit_layers)


def build_model(config: ModelConfig) -> Model:
    params, topo = init_model(config)
    return Model(config, params, topo)


# ---------------------------------------------------------------------------
# forward computation


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) bool, True for real tokens

    @classmethod
    def from_sequences(cls, sequences, pad_id=0, length=None):
        length = length or max(len(s) for s in sequences)
        tokens = np.full((len(sequences), length), pad_id, dtype=np.int64)
        mask = np.zeros((len(sequences), length), dtype=bool)
        for r, seq in enumerate(sequences):
            tokens[r, : len(seq)] = seq
            mask[r, : len(seq)] = True
        return cls(tokens, mask)

    def __len__(self):
        return self.tokens.shape[0]


def _check_batch(cfg: ModelConfig, batch: Batch):
    if batch.tokens.ndim != 2:
        raise ValueError("token ids must be a (batch, length) matrix")
    if batch.tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {batch.tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")


def embed(params: ParameterStore, tokens: np.ndarray) -> Tensor:
    positions = np.arange(tokens.shape[1])
    return ag.embedding(params["embed.token"], tokens) + ag.embedding(params["embed.position"], positions)


def attention_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, MASK_VALUE)[:, None, None, :]


def block(params: ParameterStore, cfg: ModelConfig, layer: int, h: Tensor, bias: np.ndarray) -> Tensor:
    p = f"layer.{layer}."
    B, T, d = h.shape
    H = cfg.n_heads
    dh = d // H

    x = ag.layernorm(h, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.layernorm_eps)

    def heads(name):
        y = x @ params[p + f"attn.{name}.weight"] + params[p + f"attn.{name}.bias"]
        return ag.transpose(ag.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ag.scale(q @ ag.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh)) + bias
    ctx = ag.softmax(scores, axis=-1) @ v
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    h = h + (ctx @ params[p + "attn.out.weight"] + params[p + "attn.out.bias"])

    x = ag.layernorm(h, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.layernorm_eps)
    x = ag.gelu(x @ params[p + "ffn.in.weight"] + params[p + "ffn.in.bias"])
    return h + (x @ params[p + "ffn.out.weight"] + params[p + "ffn.out.bias"])


def pooled(h: Tensor) -> Tensor:
    return h[:, 0, :]


def head(params: ParameterStore, index: int, h: Tensor) -> Tensor:
    return pooled(h) @ params[f"head.{index}.weight"] + params[f"head.{index}.bias"]


def forward_all_exits(model: Model, batch: Batch, gate_boundaries: bool = False):
    """One shared forward pass producing every exit's logits.

    Returns ``(logits, hidden)``: ``logits[i-1]`` is (batch, n_classes) for exit
    ``i``; ``hidden[l]`` is the hidden state after layer ``l`` (``hidden[0]`` is
    the embedding output). With ``gate_boundaries`` the state handed from an
    exit layer to the next layer passes through a gradient gate, so loss ``i``
    cannot reach parameters below layer ``L_{i-1}+1``.
    """
    cfg, params, topo = model.config, model.params, model.topology
    _check_batch(cfg, batch)
    bias = attention_bias(batch.mask)
    h = embed(params, batch.tokens)
    hidden = [h]
    logits = []
    exits = {layer: i for i, layer in enumerate(topo.exit_layers, start=1)}
    for layer in range(1, topo.n_layers + 1):
        h = block(params, cfg, layer, h, bias)
        hidden.append(h)
        if layer in exits:
            logits.append(head(params, exits[layer], h))
            if gate_boundaries and layer != topo.n_layers:
                h = ag.gradient_gate(h)
    return logits, hidden


class InferenceState:
    """Hidden state retained between incremental calls to :func:`forward_until`."""

    def __init__(self, batch: Batch, h: Tensor):
        self.batch = batch
        self.bias = attention_bias(batch.mask)
        self.h = h
        self.layer = 0
        self.layers_executed = 0
        self.hidden_at_exit: dict[int, np.ndarray] = {}


def forward_until(model: Model, instance, exit_index: int, state: Optional[InferenceState] = None):
    """Run only the layers needed to reach exit ``exit_index``.

    ``instance`` is a token-id sequence (or a one-row :class:`Batch`). Passing
    the returned state back continues from the deepest layer already run.
    Returns ``(logits, layers_executed, state)`` where ``logits`` has shape
    (n_classes,) and ``layers_executed`` counts every layer run on ``state``.
    """
    topo = model.topology
    if not 1 <= exit_index <= topo.n_exits:
        raise IndexError(f"exit index {exit_index} outside 1..{topo.n_exits}")
    if state is None:
        batch = instance if isinstance(instance, Batch) else Batch.from_sequences([list(instance)])
        _check_batch(model.config, batch)
        state = InferenceState(batch, embed(model.params, batch.tokens))
    target = topo.exit_layers[exit_index - 1]
    if target < state.layer:
        raise ValueError(f"state already past layer {target}")
    while state.layer < target:
        state.layer += 1
        state.h = block(model.params, model.config, state.layer, state.h, state.bias)
        state.layers_executed += 1
    state.hidden_at_exit[exit_index] = pooled(state.h).data[0]
    logits = head(model.params, exit_index, state.h).data[0]
    return logits, state.layers_executed, state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model):
    """Write ``MXEX1`` + u64 header length + canonical JSON config + float64 LE params."""
    header = canonical_json(model.config.to_dict()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, t in model.params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    offset = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    config = ModelConfig.from_dict(json.loads(raw[offset : offset + n].decode("utf-8")))
    offset += n
    model = build_model(config)
    for name, t in model.params.items():
        count = t.size
        chunk = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        t.data = chunk.astype(np.float64).reshape(t.shape)
        offset += count * 8
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
