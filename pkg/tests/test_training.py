import numpy as np
import pytest
from helpers import random_examples, tiny_model

from prdu.config import TrainConfig
from prdu.data import SynthSpec, generate_synthetic, make_examples
from prdu.model import training_loss
from prdu.training import (
    AdamState,
    AnnealSchedule,
    NonFiniteError,
    adam_step,
    classification_metrics,
    clip_global_norm,
    evaluate,
    lambda_at,
    lr_at,
    split_sessions,
    train,
)

SMALL = dict(vocab_size=50, d_emb=12, d_hidden=8, d_attn=8, d_mlp=16, dropout=0.0)


def test_adam_zero_gradient_is_noop():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(), 0.1)
    assert params["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_increments_change():
    params = {"w": np.array([0.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([1.0])}, state, 0.1)
    first = -params["w"][0]
    adam_step(params, {"w": np.array([2.0])}, state, 0.1)
    second = -params["w"][0] - first
    assert first != second
    assert state.t == 2


def test_adam_rejects_non_finite_without_update():
    params = {"w": np.array([1.0]), "u": np.array([2.0])}
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step(params, {"u": np.array([1.0]), "w": np.array([np.nan])}, state, 0.1)
    assert params["u"][0] == 2.0 and state.t == 0


def test_lr_schedule():
    assert lr_at(0, 5e-5) == 5e-5
    assert lr_at(2, 5e-5) == 2.5e-5
    assert lr_at(9, 5e-5) == pytest.approx(3.125e-6, rel=1e-15)
    values = [lr_at(e, 5e-5) for e in range(12)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(0, 1.0, (4, 2))


def test_lambda_schedule():
    s = AnnealSchedule(2, 3)
    assert lambda_at(0, s) == 0.0 and lambda_at(1, s) == 0.0
    assert lambda_at(2, s) == pytest.approx(1 / 3)
    assert lambda_at(4, s) == 1.0
    values = [lambda_at(e, s) for e in range(20)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        AnnealSchedule(0, 0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    clip_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_metrics_hand_example():
    m = classification_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert m.accuracy == 0.75
    assert m.f1[0] == pytest.approx(2 / 3)
    assert m.f1[1] == pytest.approx(0.8)
    assert m.macro_f1 == pytest.approx(0.7333, abs=1e-4)


def test_metrics_perfect_and_constant():
    m = classification_metrics([0, 1, 2, 3], [0, 1, 2, 3], 4)
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0
    truth = np.repeat(np.arange(4), 25)
    c = classification_metrics(truth, np.zeros(100, dtype=int), 4)
    assert c.accuracy == 0.25
    assert c.f1[1:] == [0.0, 0.0, 0.0]


def test_mean_loss_equals_mean_of_single_losses():
    model = tiny_model(1)
    ex = random_examples(np.random.default_rng(1), 7)
    for mode in ("TH-PH", "TW-PH"):
        batch = training_loss(model, ex, 0.5, mode).total.item()
        singles = [training_loss(model, [e], 0.5, mode).total.item() for e in ex]
        assert batch == pytest.approx(float(np.mean(singles)), abs=1e-12)


def test_parallel_evaluate_matches_sequential():
    model = tiny_model(2)
    ex = random_examples(np.random.default_rng(2), 60)
    a = evaluate(model, ex, "TH-PH", chunk=8, workers=1)
    b = evaluate(model, ex, "TH-PH", chunk=8, workers=4)
    assert a == b


def test_split_sessions_deterministic():
    sessions = generate_synthetic(SynthSpec(), 50, seed=1)
    tr, va = split_sessions(sessions, 0.1, seed=3)
    assert len(va) == 5 and len(tr) == 45
    assert split_sessions(sessions, 0.1, seed=3) == (tr, va)
    assert split_sessions(sessions, 0.0, seed=3) == (sessions, [])


def test_zero_epochs_returns_initial_model():
    sessions = generate_synthetic(SynthSpec(), 20, seed=2)
    r = train(TrainConfig(epochs=0, **SMALL), sessions)
    assert r.log == [] and r.best_epoch is None
    from prdu.model import PriorRegModel

    init = PriorRegModel.init(TrainConfig(**SMALL).model_config(), 0)
    for k in init.params:
        np.testing.assert_array_equal(r.model.params[k], init.params[k])


def test_separable_corpus_is_learned():
    spec = SynthSpec(n_topics=2, vocab_size=20, alpha_past=1.0, alpha_future=1.0)
    sessions = generate_synthetic(spec, 80, seed=3)
    cfg = TrainConfig(mode="TH-PH", n_labels=2, epochs=30, lr=1e-2, val_fraction=0.0, **{**SMALL, "vocab_size": 20})
    r = train(cfg, sessions)
    acc = [rec["accuracy"] for rec in r.log if rec["split"] == "train"]
    assert max(acc) == 1.0
    assert evaluate(r.model, make_examples(sessions, cfg.ws), "TH-PH").accuracy == 1.0


def test_training_is_deterministic_and_logs_every_split():
    sessions = generate_synthetic(SynthSpec(), 60, seed=4)
    test = generate_synthetic(SynthSpec(), 20, seed=5, prefix="t")
    cfg = TrainConfig(mode="TW-PH-S", epochs=3, **{**SMALL, "dropout": 0.3})
    a = train(cfg, sessions, test)
    b = train(cfg, sessions, test)
    assert a.log == b.log
    assert [r["split"] for r in a.log] == ["train", "val", "test"] * 3
    assert [r["lambda"] for r in a.log if r["split"] == "train"] == [0.0, 0.0, pytest.approx(1 / 3)]
    c = train(cfg.replace(seed_dropout=1), sessions, test)
    assert c.log != a.log


def test_unregularised_modes_log_zero_lambda():
    sessions = generate_synthetic(SynthSpec(), 30, seed=6)
    r = train(TrainConfig(mode="TH-PH", epochs=4, **SMALL), sessions)
    assert all(rec["lambda"] == 0.0 and rec["loss_kl"] is None for rec in r.log)
