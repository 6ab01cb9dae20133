"""Shared fixtures-as-functions for the model and acceptance tests."""

import numpy as np

from prdu import numcore as nc
from prdu.data import DialogueSession, Example, Utterance
from prdu.model import Mode, ModelConfig, PriorRegModel, gumbel_noise, training_loss
from prdu.numcore import Tape

TINY = ModelConfig(n_labels=4, vocab_size=20, d_emb=8, d_hidden=4, d_attn=4, d_mlp=8)


def random_session(rng, n_utts, vocab, n_labels, k, max_len=2, sid="r"):
    utts = []
    for i in range(1, n_utts + 1):
        toks = tuple(int(t) for t in rng.integers(0, vocab, size=rng.integers(1, max_len + 1)))
        label = int(rng.integers(0, n_labels)) if i == k else None
        utts.append(Utterance("user" if i % 2 else "agent", toks, label))
    return DialogueSession(sid, tuple(utts))


def random_examples(rng, count, cfg=TINY, n_utts=3, max_len=2, ws=1, fw="all"):
    """Examples whose whole session stays within n_utts * max_len tokens."""
    out = []
    for i in range(count):
        k = int(rng.integers(1, n_utts + 1))
        s = random_session(rng, n_utts, cfg.vocab_size, cfg.n_labels, k, max_len, sid=f"r{i}")
        out.append(Example(s, k, ws, fw, s.utterances[k - 1].label))
    return out


def loss_value(model, examples, lam, mode, noise):
    terms = training_loss(model, examples, lam, mode, noise=noise)
    return terms.total.item()


def sampled_coordinates(model, examples, rng, per_array=3):
    """A few coordinates per parameter array; embedding picks come from rows actually used."""
    used = sorted({int(t) for ex in examples for t in ex.posterior_input().tokens})
    coords = {}
    for name, arr in model.params.items():
        if name.endswith(".emb"):
            rows = rng.choice(used, size=per_array)
            cols = rng.integers(0, arr.shape[1], size=per_array)
            coords[name] = [(int(r), int(c)) for r, c in zip(rows, cols)]
        else:
            flat = rng.choice(arr.size, size=min(per_array, arr.size), replace=False)
            coords[name] = [np.unravel_index(int(i), arr.shape) for i in flat]
    return coords


def gradient_check(model, examples, mode, lam, rng, eps=1e-5, per_array=3):
    """Max relative error between backward() and central differences on sampled coordinates."""
    mode = Mode(mode)
    noise = gumbel_noise(rng, (len(examples), model.config.n_labels)) if mode is Mode.TW_PH_S else None
    tape = Tape()
    bound = model.bind(tape)
    terms = training_loss(model, examples, lam, mode, bound, noise=noise)
    grads = nc.backward(tape, terms.total)
    analytic, numeric = [], []
    for name, idxs in sampled_coordinates(model, examples, rng, per_array).items():
        g = grads[bound[name].node]
        arr = model.params[name]
        for idx in idxs:
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = loss_value(model, examples, lam, mode, noise)
            arr[idx] = orig - eps
            lo = loss_value(model, examples, lam, mode, noise)
            arr[idx] = orig
            analytic.append(g[idx])
            numeric.append((hi - lo) / (2 * eps))
    return nc.relative_error(np.array(analytic), np.array(numeric))


def tiny_model(seed=0, cfg=TINY):
    return PriorRegModel.init(cfg, seed)
