"""Adam, learning-rate and KL-annealing schedules, metrics, and the training loop."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .data import DialogueSession, Example, make_examples
from .model import Mode, PriorRegModel, predict, training_loss
from .numcore import Tape

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.  Non-finite gradients abort before any change."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise nc.ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(epoch: int, initial: float, milestones: Sequence[int] = (2, 4, 6, 8), factor: float = 0.5) -> float:
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ValueError("milestones must be strictly increasing")
    passed = sum(1 for m in milestones if m <= epoch)
    return initial * factor**passed


@dataclass(frozen=True)
class AnnealSchedule:
    warmup: int = 2
    ramp: int = 3

    def __post_init__(self):
        if self.warmup < 0 or self.ramp < 1:
            raise ValueError("need warmup >= 0 and ramp >= 1")


def lambda_at(epoch: int, schedule: AnnealSchedule = AnnealSchedule()) -> float:
    """0 during warm-up, then a linear per-epoch ramp that reaches 1 after ``ramp`` epochs."""
    if epoch < schedule.warmup:
        return 0.0
    return min(1.0, (epoch - schedule.warmup + 1) / schedule.ramp)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    n: int
    loss_ce: float | None = None
    loss_kl: float | None = None


def confusion_matrix(truth, pred, n_labels: int) -> np.ndarray:
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """Rows are truth, columns predictions.  Classes with no support and no predictions score F1 = 0."""
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    n = int(cm.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    acc = float(tp.sum() / n) if n else 0.0
    weighted = float((f1 * support).sum() / n) if n else 0.0
    return Metrics(acc, float(f1.mean()), weighted, precision.tolist(), recall.tolist(), f1.tolist(), n)


def classification_metrics(truth, pred, n_labels: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(truth, pred, n_labels))


def evaluate(
    model: PriorRegModel, examples: Sequence[Example], mode: Mode | str, chunk: int = 256, workers: int = 1
) -> Metrics:
    """Metrics of the mode's inference branch.  Chunks are scored independently and their counts merged."""
    n_labels = model.config.n_labels
    chunks = [examples[i : i + chunk] for i in range(0, len(examples), chunk)]

    def score(part):
        pred, probs = predict(model, part, mode, chunk=chunk)
        truth = np.array([ex.label for ex in part], dtype=np.int64)
        nll = -np.log(np.maximum(probs[np.arange(len(part)), truth], 1e-300))
        return confusion_matrix(truth, pred, n_labels), float(nll.sum())

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(score, chunks))
    else:
        parts = [score(c) for c in chunks]
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    nll = 0.0
    for c, s in parts:
        cm += c
        nll += s
    m = metrics_from_confusion(cm)
    m.loss_ce = nll / len(examples) if examples else None
    return m


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def split_sessions(sessions: Sequence[DialogueSession], val_fraction: float, seed: int):
    """Deterministic train/val split of sessions (val keeps file order)."""
    n_val = int(round(val_fraction * len(sessions)))
    if n_val == 0:
        return list(sessions), []
    perm = np.random.default_rng([seed, 1]).permutation(len(sessions))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(sessions) if i not in val_idx]
    val = [s for i, s in enumerate(sessions) if i in val_idx]
    return train, val


def _record(cfg: TrainConfig, epoch, split, lam, lr, m: Metrics) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "mode": cfg.mode,
        "ws": cfg.ws,
        "fw": cfg.fw,
        "lambda": lam,
        "lr": lr,
        "loss_ce": m.loss_ce,
        "loss_kl": m.loss_kl,
        "accuracy": m.accuracy,
        "macro_f1": m.macro_f1,
        "weighted_f1": m.weighted_f1,
        "seed": cfg.seed_init,
    }


@dataclass
class TrainResult:
    model: PriorRegModel
    best: PriorRegModel
    best_epoch: int | None
    log: list[dict]


def train(
    cfg: TrainConfig,
    sessions: Sequence[DialogueSession],
    test_sessions: Sequence[DialogueSession] | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``cfg.mode`` for ``cfg.epochs`` epochs; log train/val(/test) metrics per epoch."""
    if not sessions:
        raise ValueError("empty corpus")
    mode = Mode(cfg.mode)
    train_s, val_s = split_sessions(sessions, cfg.val_fraction, cfg.seed_shuffle)
    train_ex = make_examples(train_s, cfg.ws, cfg.fw)
    val_ex = make_examples(val_s, cfg.ws, cfg.fw)
    test_ex = make_examples(test_sessions, cfg.ws, cfg.fw) if test_sessions else []
    if not train_ex:
        raise ValueError("training split has no labeled utterances")
    if cfg.val_fraction > 0 and not val_ex:
        raise ValueError("validation split has no labeled utterances")

    model = PriorRegModel.init(cfg.model_config(), cfg.seed_init)
    best, best_epoch, best_acc = model.copy(), None, -1.0
    state = AdamState()
    schedule = AnnealSchedule(cfg.anneal_warmup, cfg.anneal_ramp)
    shuffle_rng = np.random.default_rng([cfg.seed_shuffle, 2])
    dropout_rng = np.random.default_rng([cfg.seed_dropout, 3])
    gumbel_rng = np.random.default_rng([cfg.seed_gumbel, 4])
    regularised = mode in (Mode.TW_PH, Mode.TW_PH_S)
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    for epoch in range(cfg.epochs):
        lam = lambda_at(epoch, schedule) if regularised else 0.0
        lr = lr_at(epoch, cfg.lr, cfg.milestones, cfg.lr_factor)
        order = shuffle_rng.permutation(len(train_ex))
        ce_sum = kl_sum = 0.0
        cm = np.zeros((cfg.n_labels, cfg.n_labels), dtype=np.int64)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_ex[i] for i in order[start : start + cfg.batch_size]]
            tape = Tape()
            bound = model.bind(tape)
            terms = training_loss(
                model,
                batch,
                lam,
                mode,
                bound,
                train=True,
                dropout=cfg.dropout,
                dropout_rng=dropout_rng,
                gumbel_rng=gumbel_rng,
                tau=cfg.tau,
            )
            loss = terms.total.item()
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            g = nc.backward(tape, terms.total)
            grads = {name: g[t.node] for name, t in bound.items()}
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, lr)
            ce_sum += float(terms.ce.sum())
            kl_sum += float(terms.kl.sum())
            dist = terms.p if mode.predicts_with_prior else terms.q
            truth = [ex.label for ex in batch]
            cm += confusion_matrix(truth, np.argmax(dist.probs.data, axis=1), cfg.n_labels)

        m = metrics_from_confusion(cm)
        m.loss_ce = ce_sum / len(train_ex)
        m.loss_kl = kl_sum / len(train_ex) if regularised else None
        emit(_record(cfg, epoch, "train", lam, lr, m))
        if val_ex:
            vm = evaluate(model, val_ex, mode)
            emit(_record(cfg, epoch, "val", lam, lr, vm))
            if vm.accuracy > best_acc:
                best, best_epoch, best_acc = model.copy(), epoch, vm.accuracy
        else:
            best, best_epoch = model.copy(), epoch
        if test_ex:
            emit(_record(cfg, epoch, "test", lam, lr, evaluate(model, test_ex, mode)))
        log.info("epoch %d %s lambda=%.3f lr=%.3g train_acc=%.4f", epoch, cfg.mode, lam, lr, m.accuracy)
    return TrainResult(model, best, best_epoch, records)


def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, separators=(",", ":"))
