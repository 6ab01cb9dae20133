import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prdu import encoder as enc
from prdu import numcore as nc
from prdu.data import FlattenedInput
from prdu.numcore import Tape, constant


def params_for(cfg, seed=0):
    return {k: constant(v) for k, v in enc.init_params(cfg, np.random.default_rng(seed)).items()}


def tokens(ids, utt=None):
    ids = np.asarray(ids, dtype=np.int64)
    return FlattenedInput(ids, np.asarray(utt if utt is not None else np.ones(len(ids), dtype=np.int64)))


SMALL = enc.EncoderConfig(vocab_size=20, d_emb=5, d_hidden=4, d_attn=3)


def test_embed_repeated_and_single_token():
    p = params_for(SMALL)
    E = enc.embed(enc.make_batch([tokens([5, 5, 5])]), p, SMALL).data
    assert E.shape == (3, 1, 5)
    np.testing.assert_array_equal(E[0], E[1])
    np.testing.assert_array_equal(E[1], E[2])
    assert enc.embed(enc.make_batch([tokens([7])]), p, SMALL).shape == (1, 1, 5)


def test_embed_rejects_out_of_vocab():
    with pytest.raises(IndexError):
        enc.embed(enc.make_batch([tokens([20])]), params_for(SMALL), SMALL)


def test_feature_mode_is_identity():
    cfg = enc.EncoderConfig(d_hidden=4, d_attn=3, input_mode="features", feature_dim=3)
    feats = np.random.default_rng(0).normal(size=(4, 3))
    batch = enc.make_batch([FlattenedInput(feats, np.arange(1, 5))])
    out = enc.embed(batch, params_for(cfg), cfg)
    np.testing.assert_array_equal(out.data[:, 0, :], feats)
    bad = enc.make_batch([FlattenedInput(np.zeros((2, 5)), np.arange(1, 3))])
    with pytest.raises(nc.ShapeError):
        enc.embed(bad, params_for(cfg), cfg)


def _gru_params(cfg, fill=None, seed=0):
    p = params_for(cfg, seed)
    if fill is not None:
        p = {k: constant(np.full(v.shape, fill)) if k.startswith("gru") else v for k, v in p.items()}
    return p


def test_bigru_zero_weights_zero_output():
    p = _gru_params(SMALL, fill=0.0)
    x = constant(np.random.default_rng(1).normal(size=(6, 2, 5)))
    out = enc.bigru_forward(x, p)
    assert out.shape == (6, 2, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_bigru_single_step_shared_weights():
    p = params_for(SMALL)
    for n in enc.GRU_NAMES:
        p[f"gru_bwd.{n}"] = p[f"gru_fwd.{n}"]
    x = constant(np.random.default_rng(2).normal(size=(1, 1, 5)))
    out = enc.bigru_forward(x, p).data
    np.testing.assert_array_equal(out[..., :4], out[..., 4:])


def test_bigru_width_mismatch():
    with pytest.raises(nc.ShapeError):
        enc.bigru_forward(constant(np.zeros((2, 1, 6))), params_for(SMALL))


def test_pool_examples():
    row = constant(np.array([[[1.5, -2.0]]]))
    np.testing.assert_array_equal(enc.pool(row).data, [[1.5, -2.0]])
    two = constant(np.array([[[1.0, 3.0]], [[3.0, 5.0]]]))
    np.testing.assert_array_equal(enc.pool(two).data, [[2.0, 4.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_pool_permutation_invariant(T, seed):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(T, 1, 3))
    perm = rng.permutation(T)
    a = enc.pool(constant(C)).data
    b = enc.pool(constant(C[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def _identity_attn(d, d_attn):
    return {
        "attn.W_q": constant(np.eye(d, d_attn)),
        "attn.W_k": constant(np.eye(d, d_attn)),
        "attn.W_v": constant(np.eye(d)),
    }


def test_attend_single_step_returns_value_projection():
    p = params_for(SMALL)
    cfg_d = SMALL.d_model
    rng = np.random.default_rng(3)
    C = rng.normal(size=(1, 1, cfg_d))
    e = constant(rng.normal(size=(1, cfg_d)))
    out = enc.attend(e, constant(C), p).data
    np.testing.assert_allclose(out, C[0] @ p["attn.W_v"].data, atol=0, rtol=0)


def test_attend_identical_rows():
    p = params_for(SMALL)
    row = np.random.default_rng(4).normal(size=SMALL.d_model)
    C = constant(np.stack([row, row])[:, None, :])
    out = enc.attend(constant(row[None, :]), C, p).data
    w = enc.attention_weights(constant(row[None, :]), C, p).data
    np.testing.assert_array_equal(w[:, 0], [0.5, 0.5])
    np.testing.assert_allclose(out[0], row @ p["attn.W_v"].data, atol=1e-15)


def test_attend_hand_example():
    p = _identity_attn(2, 2)
    C = constant(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    e = constant(np.array([[1.0, 0.0]]))
    a = math.exp(1 / math.sqrt(2))
    expected = [a / (a + 1), 1 / (a + 1)]
    np.testing.assert_allclose(enc.attention_weights(e, C, p).data[:, 0], expected, atol=1e-15)
    np.testing.assert_allclose(enc.attend(e, C, p).data[0], expected, atol=1e-15)
    np.testing.assert_allclose(expected, [0.6698, 0.3302], atol=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**31))
def test_attend_output_in_convex_hull(T, B, seed):
    rng = np.random.default_rng(seed)
    p = params_for(SMALL, seed % 1000)
    C = rng.uniform(-2, 2, size=(T, B, SMALL.d_model))
    e = constant(rng.uniform(-2, 2, size=(B, SMALL.d_model)))
    mask = np.ones((T, B))
    w = enc.attention_weights(e, constant(C), p, mask).data
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)
    out = enc.attend(e, constant(C), p, mask).data
    V = C @ p["attn.W_v"].data
    assert np.all(out >= V.min(axis=0) - 1e-12)
    assert np.all(out <= V.max(axis=0) + 1e-12)


def test_encode_eval_ignores_rng_and_train_is_reproducible():
    p = params_for(SMALL)
    batch = enc.make_batch([tokens([1, 2, 3, 4]), tokens([5, 6])])
    a = enc.encode(batch, p, SMALL, 0.3, np.random.default_rng(1), train=False).data
    b = enc.encode(batch, p, SMALL, 0.3, np.random.default_rng(2), train=False).data
    assert a.tobytes() == b.tobytes()
    c = enc.encode(batch, p, SMALL, 0.3, np.random.default_rng(7), train=True).data
    d = enc.encode(batch, p, SMALL, 0.3, np.random.default_rng(7), train=True).data
    assert c.tobytes() == d.tobytes()
    assert c.tobytes() != a.tobytes()


def test_encode_without_rnn_single_token():
    cfg = enc.EncoderConfig(vocab_size=20, d_emb=5, d_hidden=4, d_attn=3, use_rnn=False)
    p = params_for(cfg)
    r = enc.encode(enc.make_batch([tokens([9])]), p, cfg).data
    np.testing.assert_allclose(r[0], p["emb"].data[9] @ p["attn.W_v"].data, atol=0, rtol=0)


def test_encode_ignores_utterance_metadata():
    for use_rnn in (False, True):
        cfg = enc.EncoderConfig(vocab_size=20, d_emb=5, d_hidden=4, d_attn=3, use_rnn=use_rnn)
        p = params_for(cfg)
        a = enc.encode(enc.make_batch([tokens([1, 2, 3], [1, 1, 1])]), p, cfg).data
        b = enc.encode(enc.make_batch([tokens([1, 2, 3], [1, 2, 3])]), p, cfg).data
        assert a.tobytes() == b.tobytes()


def test_encode_padding_is_bit_exact():
    p = params_for(SMALL)
    seqs = [tokens([1, 2, 3, 4, 5]), tokens([6, 7]), tokens([8, 9, 10, 11, 12, 13, 14])]
    alone = [enc.encode(enc.make_batch([s]), p, SMALL).data[0] for s in seqs]
    batch = enc.encode(enc.make_batch(seqs), p, SMALL).data
    padded = enc.encode(enc.make_batch(seqs, pad_to=19), p, SMALL).data
    for i in range(3):
        assert batch[i].tobytes() == padded[i].tobytes()
        np.testing.assert_allclose(batch[i], alone[i], atol=1e-14)


def test_make_batch_rejects_short_pad():
    with pytest.raises(ValueError):
        enc.make_batch([tokens([1, 2, 3])], pad_to=2)


@pytest.mark.parametrize("use_rnn", [True, False])
def test_encode_gradient_matches_fd(use_rnn):
    cfg = enc.EncoderConfig(vocab_size=10, d_emb=4, d_hidden=3, d_attn=2, use_rnn=use_rnn)
    base = enc.init_params(cfg, np.random.default_rng(5))
    base = {k: v * 10 if k == "emb" else v for k, v in base.items()}
    batch = enc.make_batch([tokens([1, 2, 3, 2]), tokens([4, 5])])
    probe = np.random.default_rng(6).normal(size=(2, cfg.d_model))

    def value(name, arr):
        ps = {k: constant(arr if k == name else v) for k, v in base.items()}
        return float((enc.encode(batch, ps, cfg).data * probe).sum())

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in base.items()}
    loss = nc.sum(nc.mul(enc.encode(batch, leaves, cfg), constant(probe)))
    grads = nc.backward(tape, loss)
    for name, arr in base.items():
        numeric = nc.finite_difference_gradient(lambda v, n=name: value(n, v), arr, 1e-5)
        assert nc.relative_error(grads[leaves[name].node], numeric) < 1e-4, name
