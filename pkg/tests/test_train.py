import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config, toy_set
from cardio_dg.model import HeartBeatNet
from cardio_dg.nn import Tensor, ops
from cardio_dg.train import (
    AdamW,
    EarlyStopping,
    PlateauScheduler,
    TrainConfig,
    TrainingDiverged,
    adamw_update,
    evaluate_logits,
    fit,
    model_from_checkpoint,
    smoothed_cross_entropy,
)
from cardio_dg.metrics import macro_f1
from cardio_dg.nn.params import ParamStore


def plain_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


# ------------------------------------------------------------------ loss


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**31 - 1), st.floats(0.1, 30))
def test_eps_zero_equals_plain_ce(n, seed, scale):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((n, 7)) * scale
    labels = r.integers(0, 7, n)
    got = float(smoothed_cross_entropy(Tensor(logits), labels, 0.0).data)
    assert abs(got - plain_ce(logits, labels)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 0.5), st.floats(-50, 50), st.integers(1, 9), st.integers(0, 6))
def test_uniform_logits_give_ln7(eps, c, n, label):
    logits = Tensor(np.full((n, 7), c))
    got = float(smoothed_cross_entropy(logits, np.full(n, label), eps).data)
    assert abs(got - math.log(7)) <= 1e-9


def test_smoothed_ce_gradient_is_softmax_minus_target():
    r = np.random.default_rng(1)
    logits = Tensor(r.standard_normal((5, 7)), requires_grad=True)
    labels = np.array([0, 3, 6, 2, 2])
    smoothed_cross_entropy(logits, labels, 0.1).backward()
    p = np.exp(ops.log_softmax(Tensor(logits.data)).data)
    q = np.full((5, 7), 0.1 / 7)
    q[np.arange(5), labels] += 0.9
    np.testing.assert_allclose(logits.grad, (p - q) / 5, atol=1e-12)


def test_loss_stable_for_huge_logits():
    logits = Tensor(np.array([[1e4, -1e4, 0, 0, 0, 0, 0]]))
    assert np.isfinite(float(smoothed_cross_entropy(logits, [1], 0.05).data))


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        smoothed_cross_entropy(Tensor(np.zeros((2, 7))), [0, 7])


# ------------------------------------------------------------- optimizer


def test_adamw_first_step_moves_by_lr():
    theta, m, v = adamw_update(np.array([1.0, -2.0]), np.array([0.3, -5.0]), np.zeros(2), np.zeros(2), 1, 0.01, 0.0)
    np.testing.assert_allclose(theta, [1.0 - 0.01, -2.0 + 0.01], atol=1e-9)


def test_adamw_decay_is_decoupled():
    theta, _, _ = adamw_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1, 0.5)
    assert theta[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)
    theta, _, _ = adamw_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 0.1, 0.5, decay=False)
    assert theta[0] == 2.0


def reference_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        theta = theta * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-5, 5), st.floats(1e-4, 1e-1), st.floats(0, 0.1))
def test_adamw_matches_scalar_reference(grads, theta0, lr, wd):
    theta, m, v = np.array([theta0]), np.zeros(1), np.zeros(1)
    for t, g in enumerate(grads, 1):
        theta, m, v = adamw_update(theta, np.array([g]), m, v, t, lr, wd)
    assert theta[0] == pytest.approx(reference_adamw(theta0, grads, lr, wd), rel=1e-9, abs=1e-12)


def test_adamw_skips_decay_for_no_decay_params():
    store = ParamStore(np.float64)
    w = store.add("w", np.ones(3))
    b = store.add("b", np.ones(3), decay=False)
    opt = AdamW(store, weight_decay=0.5)
    w.grad = np.zeros(3)
    b.grad = np.zeros(3)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_allclose(b.data, 1.0)


def test_model_bias_and_bn_are_exempt_from_decay(tiny_model):
    for name, _ in tiny_model.store:
        exempt = name in tiny_model.store.no_decay
        is_bn = ".bn" in name
        assert exempt == (name.endswith(".bias") or is_bn), name


def test_adamw_raises_on_nonfinite_gradient():
    store = ParamStore(np.float64)
    p = store.add("w", np.ones(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingDiverged, match="gradient explosion"):
        AdamW(store).step(1e-3)


# -------------------------------------------------------- lr + stopping


def test_plateau_scheduler_trace():
    sched = PlateauScheduler(1e-3, factor=0.5, patience=5, min_lr=1e-6)
    lrs = [sched.step(v) for v in [0.5, 0.5, 0.4, 0.5, 0.5, 0.5, 0.6, 0.6]]
    # best set at step 1; five non-improvements (equal counts as none) halve at step 6
    assert lrs == [1e-3] * 5 + [5e-4, 5e-4, 5e-4]


def test_plateau_scheduler_floor():
    sched = PlateauScheduler(1e-5, patience=1, min_lr=1e-6)
    lrs = [sched.step(0.1) for _ in range(8)]
    assert min(lrs) == 1e-6 and lrs[-1] == 1e-6


def test_early_stopping_trace():
    es = EarlyStopping(patience=3)
    stops = []
    for epoch, v in enumerate([0.2, 0.5, 0.5, 0.4, 0.49, 0.9], 1):
        es.update(epoch, v)
        stops.append(es.should_stop)
    assert stops == [False, False, False, False, True, False]
    assert es.best_epoch == 6


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    assert TrainConfig().to_dict()["patience"] == 15


# -------------------------------------------------------------------- fit


def small_fit(seed=0, variant="full", epochs=4, **kw):
    train, val = toy_set(36, seed=1), toy_set(12, seed=2, prefix="v")
    model = HeartBeatNet(tiny_config(variant), seed=seed)
    cfg = TrainConfig(seed=seed, max_epochs=epochs, batch_size=8, lr=3e-3, **kw)
    return fit(train, val, model, cfg), model, val


def test_fit_is_bit_deterministic():
    (cp1, log1), _, _ = small_fit(seed=3)
    (cp2, log2), _, _ = small_fit(seed=3)
    assert cp1 == cp2
    assert log1.to_csv() == log2.to_csv()
    (cp3, _), _, _ = small_fit(seed=4)
    assert cp3.params.tobytes() != cp1.params.tobytes()


def test_fit_restores_best_epoch_and_metadata():
    (cp, log), model, val = small_fit(seed=0, epochs=6)
    f1s = [e["val_macro_f1"] for e in log.epochs]
    assert log.best_epoch == int(np.argmax(f1s)) + 1
    assert cp.metadata["best_epoch"] == log.best_epoch
    assert cp.metadata["best_val_macro_f1"] == max(f1s)
    assert cp.metadata["epochs_run"] == len(log.epochs)
    # the saved weights reproduce the logged best validation score
    restored = model_from_checkpoint(cp)
    pred = evaluate_logits(restored, val, 8).argmax(axis=1)
    assert macro_f1(val.labels, pred) == pytest.approx(max(f1s), abs=1e-12)


def test_fit_reduces_training_loss():
    (_, log), _, _ = small_fit(seed=0, epochs=8)
    losses = [e["train_loss"] for e in log.epochs]
    assert losses[-1] < losses[0]


def test_fit_early_stops():
    (_, log), _, _ = small_fit(seed=0, epochs=40, patience=2)
    assert len(log.epochs) < 40
    assert len(log.epochs) - log.best_epoch == 2


def test_trainlog_fields_and_csv(tmp_path):
    (_, log), _, _ = small_fit(seed=0, epochs=2)
    for row in log.epochs:
        assert set(row) == set(log.FIELDS)
    lines = log.to_csv().splitlines()
    assert lines[0] == ",".join(log.FIELDS) and len(lines) == 3
    log.save(tmp_path / "run")
    assert (tmp_path / "run.json").exists() and (tmp_path / "run.csv").exists()


def test_fit_rejects_overlapping_ids():
    train = toy_set(12, seed=1)
    with pytest.raises(ValueError, match="overlap"):
        fit(train, toy_set(6, seed=2), HeartBeatNet(tiny_config()), TrainConfig(max_epochs=1, batch_size=4))


def test_fit_rejects_window_mismatch():
    train, val = toy_set(12, window=32), toy_set(6, prefix="v", window=32)
    with pytest.raises(ValueError, match="window"):
        fit(train, val, HeartBeatNet(tiny_config()), TrainConfig(max_epochs=1, batch_size=4))


def test_fit_reports_divergence():
    train, val = toy_set(12), toy_set(6, prefix="v")
    train.signals[0][:] = np.nan
    with pytest.raises(TrainingDiverged):
        fit(train, val, HeartBeatNet(tiny_config("baseline")), TrainConfig(max_epochs=2, batch_size=4))


def test_checkpoint_roundtrip_preserves_predictions(tmp_path):
    from cardio_dg.dataio import load_checkpoint, save_checkpoint

    (cp, _), model, val = small_fit(seed=0, epochs=2)
    save_checkpoint(cp, tmp_path / "m.ckpt", model.store.n_state())
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back == cp
    a = evaluate_logits(model_from_checkpoint(cp), val)
    b = evaluate_logits(model_from_checkpoint(back), val)
    np.testing.assert_array_equal(a, b)
