"""Independent reference computations shared by the test modules."""

import numpy as np

from sweetexit import autograd as ag
from sweetexit.autograd import Tensor
from sweetexit.data import SyntheticTaskSpec, generate_synthetic
from sweetexit.model import ModelConfig

FD_EPS = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_op(fn, inputs, rng, eps=FD_EPS):
    """Compare the tape gradient of ``sum(w * fn(*inputs))`` with central differences.

    ``inputs`` are float arrays; a fixed random ``w`` makes the check cover the
    whole Jacobian rather than only its column sums. Returns the worst
    relative error over all inputs.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with ag.Tape():
        probe = fn(*[ag.Tensor(a) for a in arrays])
    w = rng.standard_normal(probe.shape)

    def value():
        return float(np.sum(w * fn(*[ag.Tensor(a) for a in arrays]).data))

    tensors = [ag.Tensor(a, requires_grad=True) for a in arrays]
    with ag.Tape():
        out = fn(*tensors)
        loss = ag.reduce_sum(out * ag.Tensor(w))
        grads = ag.backward(loss, wrt=tensors)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        worst = max(worst, rel_err(grads[t], numeric_grad(value, a, eps)))
    return worst


def toy_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=3, d_model=8, n_heads=2, d_ff=16, vocab_size=40, max_seq_len=10, exit_layers=[1, 2, 3])
    base.update(kw)
    return ModelConfig(**base)


def tiny_task(size=64, seed=0, split="train", **kw):
    spec = SyntheticTaskSpec(vocab_size=40, seq_len=10, cues_per_class=4, size=size, seed=seed, split=split, **kw)
    return generate_synthetic(spec)


def brute_speedup(traces, exit_layers, mode):
    """Per-instance layer counting, one instance at a time."""
    total = 0
    for t in traces:
        if mode == "ee":
            total += exit_layers[t.exit - 1]
        else:
            total += sum(exit_layers[: t.exit])
    return total / (len(traces) * exit_layers[-1])


def first_classifier_mismatch(model_config, regime_config, dataset):
    """Train SWEET and a standalone depth-L_1 model from one seed and compare step by step.

    Returns ``(steps_compared, first_mismatch)`` where ``first_mismatch`` is
    ``None`` when segment 1 and head 1 agree element-exactly after every step,
    else ``(step, parameter name)``.
    """
    import dataclasses

    from sweetexit.model import build_model
    from sweetexit.training import Regime, train_model

    sweet_model = build_model(model_config)
    names = [n for n in sweet_model.params if sweet_model.params.segment(n) == 1]
    snaps = []
    train_model(
        sweet_model,
        dataclasses.replace(regime_config, regime=Regime.SWEET),
        dataset,
        sweet=True,
        on_step=lambda s, m: snaps.append({n: m.params[n].data.copy() for n in names}),
    )
    shallow = build_model(model_config.truncated(model_config.exit_layers[0]))
    mismatch = []

    def compare(step, m):
        if mismatch:
            return
        for n in names:
            if not np.array_equal(m.params[n].data, snaps[step - 1][n]):
                mismatch.append((step, n))
                return

    train_model(shallow, dataclasses.replace(regime_config, regime=Regime.MULTI_MODEL), dataset, sweet=False, on_step=compare)
    return len(snaps), (mismatch[0] if mismatch else None)


def sweet_ownership_violations(model, batch, labels):
    """Count parameter entries that break the one-owner rule under gated per-loss backward.

    Non-owning losses must give exact zeros; the owning loss must equal the
    ungated per-loss gradient (the gate sits strictly below the owner's segment).
    """
    from sweetexit.training import per_loss_gradients

    gated = per_loss_gradients(model, batch, labels, gated=True)
    plain = per_loss_gradients(model, batch, labels, gated=False)
    nonzero, mismatched, checked = 0, 0, 0
    for name, t in model.params.items():
        owner = model.params.segment(name)
        for i, g in enumerate(gated, start=1):
            checked += 1
            if i == owner:
                if not np.allclose(g[t], plain[i - 1][t], rtol=1e-12, atol=1e-15):
                    mismatched += 1
            elif np.any(g[t] != 0.0):
                nonzero += 1
    return nonzero, mismatched, checked


def auc(scores, targets) -> float:
    """Area under the ROC curve by exhaustive pair comparison (ties count one half)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets).astype(bool)
    pos, neg = scores[targets], scores[~targets]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


def exhaustive_temperature(logits, labels, grid):
    """Grid minimiser of mean NLL written out directly, ties toward 1.0."""
    best = None
    for t in grid:
        z = logits / t
        logp = z - np.log(np.sum(np.exp(z - z.max(1, keepdims=True)), 1, keepdims=True)) - z.max(1, keepdims=True)
        nll = -np.mean(logp[np.arange(len(labels)), labels])
        key = (nll, abs(t - 1.0))
        if best is None or key < best[0]:
            best = (key, t)
    return best[1]


def gradient_cases(seed=7):
    """(name, op, input arrays) for the finite-difference sweep; at least 20 distinct shapes."""
    rng = np.random.default_rng(seed)

    def _pos(shape):
        return rng.uniform(0.5, 2.0, size=shape)

    return [
        ("add", ag.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        ("add_broadcast", ag.add, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4,))]),
        ("sub_broadcast", ag.sub, [rng.standard_normal((5, 1)), rng.standard_normal((1, 6))]),
        ("mul", ag.mul, [rng.standard_normal((4, 5)), rng.standard_normal((4, 5))]),
        ("mul_broadcast", ag.mul, [rng.standard_normal((2, 3, 1)), rng.standard_normal((3, 4))]),
        ("scale", lambda x: ag.scale(x, -2.5), [rng.standard_normal((7,))]),
        ("neg", lambda x: -x, [rng.standard_normal((2, 2))]),
        ("matmul_2d", ag.matmul, [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))]),
        ("matmul_3d_2d", ag.matmul, [rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5))]),
        ("matmul_4d", ag.matmul, [rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 2, 4, 3))]),
        ("matmul_row", ag.matmul, [rng.standard_normal((1, 6)), rng.standard_normal((6, 2))]),
        ("transpose", lambda x: ag.transpose(x, (0, 2, 1, 3)), [rng.standard_normal((2, 3, 4, 2))]),
        ("transpose_T", lambda x: x.T, [rng.standard_normal((3, 5))]),
        ("reshape", lambda x: ag.reshape(x, (4, 6)), [rng.standard_normal((2, 3, 4))]),
        ("getitem_slice", lambda x: x[:, 0, :], [rng.standard_normal((3, 4, 5))]),
        ("getitem_repeat", lambda x: x[np.array([0, 2, 0, 1])], [rng.standard_normal((3, 2))]),
        ("sum_all", lambda x: ag.reduce_sum(x), [rng.standard_normal((3, 4))]),
        ("sum_axis", lambda x: ag.reduce_sum(x, axis=1, keepdims=True), [rng.standard_normal((3, 4, 2))]),
        ("mean_axis", lambda x: ag.mean(x, axis=-1), [rng.standard_normal((5, 3))]),
        ("gelu", ag.gelu, [rng.standard_normal((4, 6)) * 2]),
        ("sigmoid", ag.sigmoid, [rng.standard_normal((10,)) * 3]),
        ("softmax_last", lambda x: ag.softmax(x, axis=-1), [rng.standard_normal((3, 5))]),
        ("softmax_axis0", lambda x: ag.softmax(x, axis=0), [rng.standard_normal((4, 2, 3))]),
        ("layernorm", ag.layernorm, [rng.standard_normal((2, 3, 6)), _pos((6,)), rng.standard_normal((6,))]),
        ("layernorm_2d", ag.layernorm, [rng.standard_normal((4, 8)) * 3 + 1, _pos((8,)), rng.standard_normal((8,))]),
        ("embedding", lambda t: ag.embedding(t, np.array([[1, 3, 1], [0, 2, 3]])), [rng.standard_normal((4, 5))]),
        ("cross_entropy", lambda z: ag.cross_entropy(z, np.array([0, 2, 1, 2])), [rng.standard_normal((4, 3))]),
        ("bce", lambda z: ag.bce_with_logits(z, np.array([[1.0], [0.0], [1.0]])), [rng.standard_normal((3, 1)) * 2]),
        (
            "composite",
            lambda x, w: ag.mean(ag.gelu(ag.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))) @ w), axis=0),
            [rng.standard_normal((5, 4)), rng.standard_normal((4, 3))],
        ),
    ]
