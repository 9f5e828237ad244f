"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations only record onto a tape while one is active (``with Tape():``) and
at least one operand requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference uses.

Gradients are accumulated in reverse recording order, so a backward pass is
bit-reproducible. A loss built with :func:`sum_losses` is differentiated one
term at a time and the per-term leaf gradients are added in term order; this
makes ``backward(sum_losses([a, b]))`` element-exact equal to accumulating
``backward(a)`` and ``backward(b)`` into one map.
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

GELU_C = 0.7978845608  # sqrt(2 / pi)

GradientMap = Dict["Tensor", np.ndarray]


class Node:
    __slots__ = ("index", "op", "inputs", "backward", "terms")

    def __init__(self, index, op, inputs, backward, terms=None):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.backward = backward
        # set only for sum_losses nodes
        self.terms = terms


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest and the innermost one is active.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def _stack(cls):
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node", "tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return None if self.node is None else self.node.index

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.active()
    result = Tensor(out)
    if tape is not None and any(t.requires_grad for t in inputs):
        node = Node(len(tape.nodes), op, tuple(inputs), backward)
        tape.nodes.append(node)
        result.node = node
        result.tape = tape
        result.requires_grad = True
    return result


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _record("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _record("scale", x.data * factor, (x,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (operands of rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        da = db = None
        if a.requires_grad:
            da = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch dims into rows: one gemm instead of a batched sum
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                db = a2.T @ g2
            else:
                db = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return _record("matmul", out, (a, b), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", np.transpose(x.data, axes), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _record("reshape", x.data.reshape(shape), (x,), backward)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", x.data[index], (x,), backward)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), backward)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_array(v: np.ndarray, axis=-1) -> np.ndarray:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    out = softmax_array(x.data, axis)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), backward)


def layernorm(x, gain, bias, eps=1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _record("layernorm", out, (x, gain, bias), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer index array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding index out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record("embedding", table.data[ids], (table,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (batch, classes)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits for {labels.shape[0]} labels, got {logits.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of class range [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(n)
    out = np.mean(lse - z[rows, labels])

    def backward(g):
        probs = softmax_array(z, axis=1)
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return _record("cross_entropy", np.asarray(out), (logits,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of a logistic unit against 0/1 ``targets``."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce target shape {y.shape} != logits {logits.shape}")
    z = logits.data
    n = z.size
    out = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        return ((_sigmoid(z) - y) * (g / n),)

    return _record("bce_with_logits", np.asarray(out), (logits,), backward)


def gradient_gate(x) -> Tensor:
    """Identity in the forward pass; passes no gradient back to ``x``.

    The output is still recorded so downstream ops differentiate normally,
    but traversal stops here: nothing upstream of the gate is reached.
    """
    x = as_tensor(x)

    def backward(g):
        return (None,)

    return _record("gradient_gate", x.data.copy(), (x,), backward)


def sum_losses(losses: Sequence[Tensor]) -> Tensor:
    """Scalar sum of scalar losses, differentiated term by term in order."""
    losses = [as_tensor(l) for l in losses]
    if not losses:
        raise ValueError("sum_losses needs at least one loss")
    for l in losses:
        if l.size != 1:
            raise ShapeError(f"sum_losses terms must be scalar, got {l.shape}")
    total = losses[0].data.reshape(())
    for l in losses[1:]:
        total = total + l.data.reshape(())
    out = _record("sum_losses", np.asarray(total), losses, lambda g: tuple(g for _ in losses))
    if out.node is not None:
        out.node.terms = tuple(losses)
    return out


# ---------------------------------------------------------------------------
# backward


def backward(
    loss: Tensor,
    grads: Optional[GradientMap] = None,
    wrt: Optional[Iterable[Tensor]] = None,
) -> GradientMap:
    """Gradients of scalar ``loss`` with respect to the leaves it reaches.

    If ``grads`` is given, results are added into it (and it is returned);
    this is how several losses are accumulated into one map. ``wrt`` lists
    leaves that must appear in the result: unreached ones get exact zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if grads is None:
        grads = {}
    if loss.node is not None and loss.node.terms is not None:
        for term in loss.node.terms:
            backward(term, grads)
    elif loss.node is not None:
        _accumulate(grads, _single_pass(loss))
    elif loss.requires_grad:
        # loss is itself a leaf
        _accumulate(grads, {loss: np.ones_like(loss.data)})
    if wrt is not None:
        for t in wrt:
            if t not in grads:
                grads[t] = np.zeros_like(t.data)
    return grads


def _accumulate(grads: GradientMap, local: GradientMap):
    for leaf, g in local.items():
        if leaf in grads:
            grads[leaf] = grads[leaf] + g
        else:
            grads[leaf] = g.copy()


def _single_pass(root: Tensor) -> GradientMap:
    nodes = root.tape.nodes
    pending: dict[int, np.ndarray] = {root.node.index: np.ones_like(root.data)}
    leaves: GradientMap = {}
    for index in range(root.node.index, -1, -1):
        g = pending.pop(index, None)
        if g is None:
            continue
        node = nodes[index]
        input_grads = node.backward(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                key = inp.node.index
                pending[key] = pending[key] + ig if key in pending else ig
            elif inp in leaves:
                leaves[inp] = leaves[inp] + ig
            else:
                leaves[inp] = ig
    return leaves
