"""Dialogue corpora, context windows, the synthetic topic corpus and its Bayes oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .numcore import Categorical, categorical_from_log_probs

ALL = "all"
Window = Union[int, str]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    speaker: str
    tokens: tuple[int, ...] | None = None
    label: int | None = None
    features: tuple[float, ...] | None = None

    def __len__(self):
        return len(self.tokens) if self.tokens is not None else 1


@dataclass(frozen=True)
class DialogueSession:
    session_id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"session {self.session_id!r} has no utterances")
        for i, u in enumerate(self.utterances, 1):
            if u.tokens is not None and len(u.tokens) == 0:
                raise CorpusError(f"session {self.session_id!r}: utterance {i} is empty")
            if u.tokens is None and not u.features:
                raise CorpusError(f"session {self.session_id!r}: utterance {i} is empty")

    @property
    def n(self) -> int:
        return len(self.utterances)

    def replace_utterance(self, index: int, utt: Utterance) -> DialogueSession:
        """Copy with utterance ``index`` (1-based) swapped out."""
        utts = list(self.utterances)
        utts[index - 1] = utt
        return DialogueSession(self.session_id, tuple(utts))


@dataclass(frozen=True, eq=False)
class FlattenedInput:
    """Word-level sequence; ``utt_index[t]`` is the 1-based source utterance of position t.

    ``tokens`` holds integer ids, or a (T, F) array of features in feature mode.
    """

    tokens: np.ndarray
    utt_index: np.ndarray

    def __post_init__(self):
        if len(self.tokens) != len(self.utt_index):
            raise CorpusError("tokens and utterance indices differ in length")
        if len(self.utt_index) and np.any(np.diff(self.utt_index) < 0):
            raise CorpusError("utterance indices must be non-decreasing")

    @property
    def length(self) -> int:
        return len(self.utt_index)

    @property
    def is_features(self) -> bool:
        return self.tokens.ndim == 2


def flatten(session: DialogueSession, start: int, end: int) -> FlattenedInput:
    """Concatenate utterances ``start..end`` (1-based, inclusive)."""
    if not 1 <= start <= end <= session.n:
        raise CorpusError(f"invalid range {start}..{end} for a session of {session.n}")
    utts = session.utterances[start - 1 : end]
    if utts[0].tokens is None:
        feats = np.array([u.features for u in utts], dtype=np.float64)
        return FlattenedInput(feats, np.arange(start, end + 1))
    toks = np.fromiter((t for u in utts for t in u.tokens), dtype=np.int64)
    idx = np.repeat(np.arange(start, end + 1), [len(u.tokens) for u in utts])
    return FlattenedInput(toks, idx)


@dataclass(frozen=True, eq=False)
class Example:
    session: DialogueSession
    k: int
    ws: int
    fw: Window
    label: int

    @property
    def prior_range(self) -> tuple[int, int]:
        return max(1, self.k - self.ws), self.k

    @property
    def posterior_range(self) -> tuple[int, int]:
        end = self.session.n if self.fw == ALL else min(self.session.n, self.k + int(self.fw))
        return max(1, self.k - self.ws), end

    def prior_input(self) -> FlattenedInput:
        return flatten(self.session, *self.prior_range)

    def posterior_input(self) -> FlattenedInput:
        return flatten(self.session, *self.posterior_range)


def parse_window(value) -> Window:
    if isinstance(value, str):
        if value.strip().lower() == ALL:
            return ALL
        value = int(value)
    if value < 0:
        raise ValueError(f"window size must be >= 0 or 'all', got {value}")
    return int(value)


def make_examples(sessions: Iterable[DialogueSession], ws: int, fw: Window = ALL) -> list[Example]:
    """One example per labeled utterance; ``ws`` counts history turns before the query."""
    if ws < 0:
        raise ValueError("ws must be >= 0")
    fw = parse_window(fw)
    out = []
    for s in sessions:
        for k, u in enumerate(s.utterances, 1):
            if u.label is not None:
                out.append(Example(s, k, ws, fw, u.label))
    return out


# ---------------------------------------------------------------------------
# corpus file: one JSON object per line
# ---------------------------------------------------------------------------

_SESSION_KEYS = {"session_id", "utterances"}
_UTT_KEYS = {"speaker", "tokens", "label", "features"}


def _utterance_from_json(obj, n_labels, vocab_size) -> Utterance:
    if not isinstance(obj, dict):
        raise CorpusError("utterance must be an object")
    unknown = set(obj) - _UTT_KEYS
    if unknown:
        raise CorpusError(f"unknown utterance field(s): {sorted(unknown)}")
    speaker = obj.get("speaker")
    if not isinstance(speaker, str):
        raise CorpusError("speaker must be a string")
    label = obj.get("label")
    if label is not None:
        if isinstance(label, bool) or not isinstance(label, int):
            raise CorpusError(f"label must be an integer or null, got {label!r}")
        if label < 0 or (n_labels is not None and label >= n_labels):
            raise CorpusError(f"label {label} out of range [0, {n_labels})")
    has_tokens, has_feats = "tokens" in obj, "features" in obj
    if has_tokens == has_feats:
        raise CorpusError("utterance needs exactly one of 'tokens' or 'features'")
    if has_tokens:
        toks = obj["tokens"]
        if not isinstance(toks, list) or not toks:
            raise CorpusError("empty utterance")
        for t in toks:
            if isinstance(t, bool) or not isinstance(t, int) or t < 0:
                raise CorpusError(f"token ids must be non-negative integers, got {t!r}")
            if vocab_size is not None and t >= vocab_size:
                raise CorpusError(f"token id {t} out of range for vocabulary {vocab_size}")
        return Utterance(speaker, tuple(toks), label)
    feats = obj["features"]
    if not isinstance(feats, list) or not feats:
        raise CorpusError("empty utterance")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats):
        raise CorpusError("features must be numbers")
    return Utterance(speaker, None, label, tuple(float(v) for v in feats))


def session_from_json(obj, n_labels: int | None = None, vocab_size: int | None = None) -> DialogueSession:
    if not isinstance(obj, dict):
        raise CorpusError("record must be an object")
    unknown = set(obj) - _SESSION_KEYS
    if unknown:
        raise CorpusError(f"unknown field(s): {sorted(unknown)}")
    missing = _SESSION_KEYS - set(obj)
    if missing:
        raise CorpusError(f"missing field(s): {sorted(missing)}")
    if not isinstance(obj["session_id"], str):
        raise CorpusError("session_id must be a string")
    utts = obj["utterances"]
    if not isinstance(utts, list):
        raise CorpusError("utterances must be an array")
    return DialogueSession(obj["session_id"], tuple(_utterance_from_json(u, n_labels, vocab_size) for u in utts))


def session_to_json(s: DialogueSession) -> dict:
    utts = []
    for u in s.utterances:
        d = {"speaker": u.speaker}
        if u.tokens is not None:
            d["tokens"] = list(u.tokens)
        else:
            d["features"] = list(u.features)
        d["label"] = u.label
        utts.append(d)
    return {"session_id": s.session_id, "utterances": utts}


def load_corpus(path, n_labels: int | None = None, vocab_size: int | None = None) -> list[DialogueSession]:
    """Read a newline-delimited JSON corpus; errors name the 1-based line."""
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sessions.append(session_from_json(json.loads(line), n_labels, vocab_size))
            except (json.JSONDecodeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return sessions


def save_corpus(sessions: Sequence[DialogueSession], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_json(s), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# synthetic topic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generative process of the synthetic corpus.

    Each session picks a topic uniformly.  A token of utterance i is drawn from
    the topic's slice of ``slice_size`` ids with probability ``alpha_past``
    (i <= k) or ``alpha_future`` (i > k), otherwise uniformly from the whole
    vocabulary.  Only the query utterance ``k = ceil(N/2)`` is labeled.
    """

    n_topics: int = 4
    vocab_size: int = 50
    n_utterances: int = 7
    min_len: int = 3
    max_len: int = 6
    alpha_past: float = 0.2
    alpha_future: float = 0.8
    slice_size: int = 10

    def __post_init__(self):
        if self.n_topics < 2:
            raise ValueError("need at least two topics")
        if self.n_topics * self.slice_size > self.vocab_size:
            raise ValueError("topic slices do not fit in the vocabulary")
        if not 0 <= self.alpha_past <= self.alpha_future <= 1:
            raise ValueError("need 0 <= alpha_past <= alpha_future <= 1")
        if self.alpha_past == self.alpha_future and self.alpha_future < 1:
            raise ValueError("alpha_future must exceed alpha_past")
        if self.n_utterances < 1 or not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid session or utterance length")

    @property
    def query_index(self) -> int:
        return math.ceil(self.n_utterances / 2)

    def alpha(self, utt_index: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(utt_index) <= self.query_index, self.alpha_past, self.alpha_future)


def generate_synthetic(spec: SynthSpec, n_sessions: int, seed: int, prefix: str = "s") -> list[DialogueSession]:
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    rng = np.random.default_rng(seed)
    k = spec.query_index
    sessions = []
    for n in range(n_sessions):
        topic = int(rng.integers(spec.n_topics))
        utts = []
        for i in range(1, spec.n_utterances + 1):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            alpha = spec.alpha_past if i <= k else spec.alpha_future
            in_slice = rng.random(length) < alpha
            slice_tok = topic * spec.slice_size + rng.integers(spec.slice_size, size=length)
            noise_tok = rng.integers(spec.vocab_size, size=length)
            toks = np.where(in_slice, slice_tok, noise_tok)
            speaker = "user" if i % 2 else "agent"
            utts.append(Utterance(speaker, tuple(int(t) for t in toks), topic if i == k else None))
        sessions.append(DialogueSession(f"{prefix}{n:06d}", tuple(utts)))
    return sessions


def topic_log_likelihood(spec: SynthSpec, observed: FlattenedInput) -> np.ndarray:
    """Log p(observed | topic) for every topic, by enumeration."""
    toks = np.asarray(observed.tokens, dtype=np.int64)
    alpha = spec.alpha(observed.utt_index)
    in_slice = (toks[None, :] // spec.slice_size) == np.arange(spec.n_topics)[:, None]
    lik = alpha[None, :] * in_slice / spec.slice_size + (1.0 - alpha[None, :]) / spec.vocab_size
    with np.errstate(divide="ignore"):
        return np.log(lik).sum(axis=1)


def bayes_oracle(spec: SynthSpec, observed: FlattenedInput) -> Categorical:
    """Exact posterior over topics under a uniform topic prior."""
    return categorical_from_log_probs(topic_log_likelihood(spec, observed))


def oracle_accuracy(spec: SynthSpec, examples: Sequence[Example], use_future: bool) -> float:
    """Accuracy of the Bayes oracle on the prior (or posterior) window of each example."""
    hits = 0
    for ex in examples:
        obs = ex.posterior_input() if use_future else ex.prior_input()
        hits += int(bayes_oracle(spec, obs).argmax()) == ex.label
    return hits / len(examples) if examples else float("nan")
