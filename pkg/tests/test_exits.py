import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sweetexit.model as model_mod
from sweetexit.autograd import softmax_array
from sweetexit.exits import (
    TEMPERATURE_GRID,
    ExitPolicy,
    Gate,
    calibrate_temperature,
    early_exit_scores,
    fit_gate,
    fit_temperature,
    predict_cascade,
    predict_dataset,
    predict_early_exit,
    traces_from_scores,
    train_lte_gates,
)
from sweetexit.harness import threshold_grid
from sweetexit.model import build_model

from oracles import auc, exhaustive_temperature, tiny_config, tiny_task


@pytest.fixture(scope="module")
def trained():
    from sweetexit.training import RegimeConfig, train

    data = tiny_task(size=160, seed=2, cue_strength=(0.2, 0.8))
    result = train(RegimeConfig(regime="ee", batch_size=16, epochs=2, learning_rate=1e-2), tiny_config(init_seed=2), data)
    return result.model, data


def test_temperature_grid():
    assert TEMPERATURE_GRID[0] == 0.25 and TEMPERATURE_GRID[-1] == 4.0 and len(TEMPERATURE_GRID) == 16


def test_calibrated_logits_select_temperature_near_one():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.5, 0.99, size=20000)
    logits = np.stack([np.log(p), np.log1p(-p)], axis=1)
    labels = (rng.random(20000) >= p).astype(int)
    assert abs(fit_temperature(logits, labels) - 1.0) <= 0.25


def test_doubling_logits_doubles_temperature():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.5, 0.95, size=20000)
    logits = np.stack([np.log(p), np.log1p(-p)], axis=1) * 0.75
    labels = (rng.random(20000) >= p).astype(int)
    t1 = fit_temperature(logits, labels)
    t2 = fit_temperature(2 * logits, labels)
    assert abs(t2 - 2 * t1) <= 0.25


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20.0))
def test_fit_temperature_matches_exhaustive_grid(seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((50, 3)) * scale
    labels = rng.integers(0, 3, size=50)
    assert fit_temperature(logits, labels) == exhaustive_temperature(logits, labels, TEMPERATURE_GRID)


def test_uninformative_logits_tie_to_one():
    assert fit_temperature(np.zeros((10, 2)), np.zeros(10, dtype=int)) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_temperature_never_changes_prediction(seed):
    logits = np.random.default_rng(seed).standard_normal((20, 4)) * 5
    base = logits.argmax(1)
    for t in TEMPERATURE_GRID:
        np.testing.assert_array_equal(softmax_array(logits / t).argmax(1), base)


def test_calibrate_temperature_per_exit(trained):
    model, data = trained
    temps = calibrate_temperature(model, data)
    assert len(temps) == 3 and all(t in TEMPERATURE_GRID for t in temps)


def test_confidence_exit_examples():
    # topology [1,4,6,12]: confident first exit
    layers = (1, 4, 6, 12)
    scores = np.array([[0.9, 0.9, 0.9, 0.9]])
    preds = np.zeros((1, 4), dtype=int)
    (t,) = traces_from_scores(scores, preds, layers, 0.51)
    assert (t.exit, t.layers_ee, t.layers_mm) == (1, 1, 1)
    (t,) = traces_from_scores(scores * 0 + 0.6, preds, layers, 0.999999)
    assert (t.exit, t.layers_ee, t.layers_mm) == (4, 12, 23)
    (t,) = traces_from_scores(np.array([[0.5, 0.6, 0.95, 0.99]]), preds, layers, 0.9)
    assert (t.exit, t.layers_ee, t.layers_mm) == (3, 6, 11)


def test_threshold_is_inclusive():
    (t,) = traces_from_scores(np.array([[0.75, 0.9]]), np.zeros((1, 2), int), (1, 2), 0.75)
    assert t.exit == 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n_classes=st.integers(2, 5))
def test_exit_index_monotone_in_threshold(seed, n_classes):
    rng = np.random.default_rng(seed)
    probs = softmax_array(rng.standard_normal((40, 4, n_classes)) * 3)
    scores, preds = probs.max(-1), probs.argmax(-1)
    exits = [
        [t.exit for t in traces_from_scores(scores, preds, (1, 2, 3, 4), th)] for th in threshold_grid(n_classes)
    ]
    assert np.all(np.diff(np.array(exits), axis=0) >= 0)


def test_incremental_prediction_matches_score_matrix(trained):
    model, data = trained
    policy = ExitPolicy("confidence", 0.8, temperatures=[1.5, 1.0, 0.75])
    scores, preds = early_exit_scores(model, data, policy)
    fast = traces_from_scores(scores, preds, model.topology.exit_layers, 0.8, data.labels, data.ids)
    slow = predict_dataset(predict_early_exit, data, model, policy)
    assert [t.to_dict()["exit"] for t in fast] == [t.exit for t in slow]
    assert [t.pred for t in fast] == [t.pred for t in slow]
    np.testing.assert_allclose([t.conf for t in fast], [t.conf for t in slow], atol=1e-12)


def test_threaded_prediction_keeps_order(trained, monkeypatch):
    model, data = trained
    policy = ExitPolicy("confidence", 0.7)
    serial = predict_dataset(predict_early_exit, data, model, policy)
    monkeypatch.setenv("SWEETEXIT_THREADS", "3")
    threaded = predict_dataset(predict_early_exit, data, model, policy)
    assert [t.to_dict() for t in serial] == [t.to_dict() for t in threaded]


def test_layer_accounting_against_instrumented_forward(trained, monkeypatch):
    model, data = trained
    calls = []
    real_block = model_mod.block
    monkeypatch.setattr(model_mod, "block", lambda *a: calls.append(a[2]) or real_block(*a))
    policy = ExitPolicy("confidence", 0.75)
    for k in range(30):
        calls.clear()
        trace = predict_early_exit(model, policy, data.sequences[k])
        assert len(calls) == trace.layers_ee
        assert trace.layers_mm == sum(model.topology.exit_layers[: trace.exit])


def _split_into_cascade(model):
    """Single-exit models whose only head reproduces exit i of ``model``."""
    models = []
    for i, depth in enumerate(model.topology.exit_layers, start=1):
        sub = build_model(model.config.truncated(depth))
        for name, t in sub.params.items():
            src = f"head.{i}." + name.split(".", 2)[2] if name.startswith("head.") else name
            t.data = model.params[src].data.copy()
        models.append(sub)
    return models


def test_cascade_and_early_exit_agree_on_identical_logits(trained, monkeypatch):
    model, data = trained
    cascade = _split_into_cascade(model)
    policy = ExitPolicy("confidence", 0.8)
    calls = []
    real_block = model_mod.block
    monkeypatch.setattr(model_mod, "block", lambda *a: calls.append(a[2]) or real_block(*a))
    for k in range(30):
        ee = predict_early_exit(model, policy, data.sequences[k])
        calls.clear()
        mm = predict_cascade(cascade, policy, data.sequences[k])
        assert mm.exit == ee.exit and mm.pred == ee.pred
        assert len(calls) == mm.layers_mm


def test_gate_scores_in_unit_interval():
    g = Gate(np.array([50.0, -50.0]), 3.0)
    s = g.score(np.random.default_rng(0).standard_normal((100, 2)))
    assert np.all((s > 0) & (s < 1))


def test_gate_learns_separable_correctness_signal():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((600, 6))
    y = (x @ np.array([1.5, -1.0, 0.5, 0.0, 0.0, 0.0]) + 0.3 * rng.standard_normal(600) > 0).astype(float)
    gate = fit_gate(x[:400], y[:400])
    assert auc(gate.score(x[400:]), y[400:]) >= 0.9


def test_gate_training_leaves_backbone_untouched(trained):
    model, data = trained
    before = model.params.frozen()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gates = train_lte_gates(model, data, steps=20)
    assert model.params.frozen() == before
    assert len(gates) == 3


def test_degenerate_gate_target_warns():
    model = build_model(tiny_config())
    data = tiny_task(size=20)
    data.labels[:] = 0
    for h in ("head.1", "head.2", "head.3"):
        model.params[h + ".bias"].data[:] = [10.0, -10.0]
    with pytest.warns(RuntimeWarning):
        train_lte_gates(model, data, steps=5)


def test_policy_validation():
    with pytest.raises(ValueError):
        ExitPolicy("entropy")
    with pytest.raises(ValueError):
        ExitPolicy("lte")
    with pytest.raises(ValueError):
        ExitPolicy("confidence", temperatures=[1.0, 0.0])
