"""Twin-branch model: a history-only prior p and a whole-dialogue posterior q.

Training modes
--------------
``TH-PH``    cross entropy on p (history only; baseline)
``TW-PW``    cross entropy on q (whole dialogue, also at inference)
``TW-PH``    cross entropy on q plus ``lam * KL(q || p)``; predicts with p
``TW-PH-S``  as TW-PH, but the cross entropy sees a Gumbel-softmax sample of q
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from . import numcore as nc
from .data import DialogueSession, Example, Window, flatten
from .numcore import Categorical, Tape, Tensor, constant

MAGIC = b"PRDU1\n"


class Mode(str, Enum):
    TH_PH = "TH-PH"
    TW_PW = "TW-PW"
    TW_PH = "TW-PH"
    TW_PH_S = "TW-PH-S"

    @property
    def uses_prior(self) -> bool:
        return self is not Mode.TW_PW

    @property
    def uses_posterior(self) -> bool:
        return self is not Mode.TH_PH

    @property
    def predicts_with_prior(self) -> bool:
        return self is not Mode.TW_PW


MODES = tuple(m.value for m in Mode)


@dataclass(frozen=True)
class ModelConfig:
    n_labels: int = 4
    vocab_size: int = 50
    d_emb: int = 32
    d_hidden: int = 32
    d_attn: int = 16
    d_mlp: int = 64
    use_rnn: bool = True
    input_mode: str = "tokens"
    feature_dim: int = 0
    share_params: bool = False
    detach_q: bool = False

    def __post_init__(self):
        if self.n_labels < 2:
            raise ValueError("need at least two labels")
        if self.d_mlp < 1:
            raise ValueError("d_mlp must be positive")

    @property
    def encoder(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            self.vocab_size, self.d_emb, self.d_hidden, self.d_attn, self.use_rnn, self.input_mode, self.feature_dim
        )


def _head_shapes(d_model, d_mlp, n_labels):
    return {"head.W1": (d_model, d_mlp), "head.b1": (d_mlp,), "head.W2": (d_mlp, n_labels), "head.b2": (n_labels,)}


class PriorRegModel:
    """Parameters of both branches plus evaluation counters.

    Parameter names are ``<branch>.<component>``; with ``share_params`` the
    posterior branch reads the prior's arrays.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.counters = {"prior": 0, "posterior": 0}
        expected = self.param_shapes()
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")

    def branches(self) -> tuple[str, ...]:
        return ("prior",) if self.config.share_params else ("prior", "posterior")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        ecfg = self.config.encoder
        shapes = {}
        for br in self.branches():
            for n, s in enc.param_shapes(ecfg).items():
                shapes[f"{br}.{n}"] = s
            for n, s in _head_shapes(ecfg.d_model, self.config.d_mlp, self.config.n_labels).items():
                shapes[f"{br}.{n}"] = s
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> PriorRegModel:
        rng = np.random.default_rng([seed, 0])
        ecfg = config.encoder
        params = {}
        for br in ("prior",) if config.share_params else ("prior", "posterior"):
            for n, a in enc.init_params(ecfg, rng).items():
                params[f"{br}.{n}"] = a
            for n, s in _head_shapes(ecfg.d_model, config.d_mlp, config.n_labels).items():
                if n.endswith(("b1", "b2")):
                    params[f"{br}.{n}"] = np.zeros(s)
                else:
                    lim = 1.0 / math.sqrt(s[0])
                    params[f"{br}.{n}"] = rng.uniform(-lim, lim, size=s)
        return cls(config, params)

    def copy(self) -> PriorRegModel:
        return PriorRegModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Tensors for every parameter: tape leaves, or constants when ``tape`` is None."""
        if tape is None:
            return {k: constant(v) for k, v in self.params.items()}
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def branch_view(self, bound: Mapping[str, Tensor], branch: str) -> dict[str, Tensor]:
        if self.config.share_params:
            branch = "prior"
        prefix = branch + "."
        return {k[len(prefix) :]: v for k, v in bound.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def head(r: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    h = nc.tanh(nc.add_bias(nc.matmul(r, params["head.W1"]), params["head.b1"]))
    return nc.add_bias(nc.matmul(h, params["head.W2"]), params["head.b2"])


def branch_logits(
    model: PriorRegModel,
    branch: str,
    batch: enc.Batch,
    bound: Mapping[str, Tensor] | None = None,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """(B, L) logits of one branch."""
    model.counters[branch] += 1
    if bound is None:
        bound = model.bind()
    params = model.branch_view(bound, branch)
    r = enc.encode(batch, params, model.config.encoder, rate, rng, train)
    return head(r, params)


def prior_batch(examples: Sequence[Example], pad_to: int | None = None) -> enc.Batch:
    return enc.make_batch([ex.prior_input() for ex in examples], pad_to)


def posterior_batch(examples: Sequence[Example], pad_to: int | None = None) -> enc.Batch:
    return enc.make_batch([ex.posterior_input() for ex in examples], pad_to)


def prior_forward(model: PriorRegModel, session: DialogueSession, k: int, ws: int, bound=None) -> Categorical:
    """p(z | u_{max(1,k-ws)..k}) for one query."""
    if not 1 <= k <= session.n or ws < 0:
        raise ValueError("need 1 <= k <= N and ws >= 0")
    batch = enc.make_batch([flatten(session, max(1, k - ws), k)])
    return _row(nc.softmax(branch_logits(model, "prior", batch, bound)))


def posterior_forward(
    model: PriorRegModel, session: DialogueSession, k: int, ws: int, fw: Window = "all", bound=None
) -> Categorical:
    """q(z | u_{max(1,k-ws)..min(N,k+fw)}) for one query."""
    ex = Example(session, k, ws, fw if fw == "all" else int(fw), -1)
    if not 1 <= k <= session.n or ws < 0:
        raise ValueError("need 1 <= k <= N and ws >= 0")
    batch = enc.make_batch([ex.posterior_input()])
    return _row(nc.softmax(branch_logits(model, "posterior", batch, bound)))


def _row(c: Categorical) -> Categorical:
    # single-example batches: drop the batch axis on constants only
    if c.probs.is_constant:
        return Categorical(constant(c.probs.data[0]), constant(c.log_probs.data[0]))
    return c


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # keep U strictly inside (0, 1)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


def gumbel_sample(logits: Tensor, temperature: float, rng=None, noise=None) -> Categorical:
    """Relaxed one-hot sample softmax((logits + g) / temperature), g ~ Gumbel(0, 1)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_sample needs an rng or explicit noise")
        noise = gumbel_noise(rng, logits.shape)
    perturbed = nc.add(logits, constant(noise))
    return nc.softmax(nc.scale(perturbed, 1.0 / temperature))


@dataclass
class LossTerms:
    total: Tensor  # scalar, mean over the batch
    ce: np.ndarray  # per-example cross entropy
    kl: np.ndarray  # per-example KL(q || p); zeros when absent
    p: Categorical | None = None
    q: Categorical | None = None


def training_loss(
    model: PriorRegModel,
    examples: Sequence[Example],
    lam: float,
    mode: Mode | str,
    bound: Mapping[str, Tensor] | None = None,
    *,
    train: bool = False,
    dropout: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
    gumbel_rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    tau: float = 1.0,
    pad_to: tuple[int, int] | None = None,
) -> LossTerms:
    """Mean-reduced objective of ``mode`` over ``examples`` (minimisation form)."""
    mode = Mode(mode)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    labels = np.array([ex.label for ex in examples])
    if bound is None:
        bound = model.bind()
    pp, pq = pad_to if pad_to is not None else (None, None)
    p = q = None
    if mode.uses_prior:
        logits_p = branch_logits(model, "prior", prior_batch(examples, pp), bound, dropout, dropout_rng, train)
        p = nc.softmax(logits_p)
    if mode.uses_posterior:
        logits_q = branch_logits(model, "posterior", posterior_batch(examples, pq), bound, dropout, dropout_rng, train)
        q = nc.softmax(logits_q)

    if mode is Mode.TH_PH:
        ce = nc.cross_entropy(p, labels)
    elif mode is Mode.TW_PW:
        ce = nc.cross_entropy(q, labels)
    elif mode is Mode.TW_PH:
        ce = nc.cross_entropy(q, labels)
    else:
        ce = nc.cross_entropy(gumbel_sample(logits_q, tau, gumbel_rng, noise), labels)

    per_example = ce
    kl_vals = np.zeros(len(examples))
    if mode in (Mode.TW_PH, Mode.TW_PH_S):
        target = nc.detach_categorical(q) if model.config.detach_q else q
        kl = nc.kl_categorical(target, p)
        kl_vals = kl.data.copy()
        if lam > 0.0:
            per_example = nc.add(ce, nc.scale(kl, lam))
    total = nc.mean(per_example, axis=0)
    return LossTerms(total, ce.data.copy(), kl_vals, p, q)


def predict(
    model: PriorRegModel, examples: Sequence[Example], mode: Mode | str, chunk: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Labels (argmax, ties to the lowest index) and probabilities of the inference branch."""
    mode = Mode(mode)
    branch = "prior" if mode.predicts_with_prior else "posterior"
    make = prior_batch if branch == "prior" else posterior_batch
    bound = model.bind()
    probs = []
    for i in range(0, len(examples), chunk):
        part = examples[i : i + chunk]
        logits = branch_logits(model, branch, make(part), bound)
        probs.append(nc.softmax(logits).probs.data)
    if not probs:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.config.n_labels))
    probs = np.concatenate(probs)
    return np.argmax(probs, axis=1), probs


def predict_one(model: PriorRegModel, example: Example, mode: Mode | str) -> tuple[int, Categorical]:
    mode = Mode(mode)
    if mode.predicts_with_prior:
        dist = prior_forward(model, example.session, example.k, example.ws)
    else:
        dist = posterior_forward(model, example.session, example.k, example.ws, example.fw)
    return int(dist.argmax()), dist


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PriorRegModel, path, meta: dict | None = None) -> None:
    """Magic line, one JSON header line, then float64 little-endian arrays in order."""
    header = {
        "config": asdict(model.config),
        "params": [[n, list(a.shape)] for n, a in model.params.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in model.params.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PriorRegModel, dict]:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated at {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return PriorRegModel(ModelConfig(**header["config"]), params), header["meta"]
