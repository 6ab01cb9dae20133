"""Run configuration: flat ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .data import ALL, Window, parse_window
from .model import MODES, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "TW-PH"
    ws: int = 3
    fw: Window = ALL
    # model
    n_labels: int = 4
    vocab_size: int = 50
    input_mode: str = "tokens"
    feature_dim: int = 0
    d_emb: int = 32
    d_hidden: int = 32
    d_attn: int = 16
    d_mlp: int = 64
    use_rnn: bool = True
    share_params: bool = False
    detach_q: bool = False
    # optimisation
    dropout: float = 0.3
    lr: float = 3e-3
    milestones: tuple[int, ...] = (2, 4, 6, 8)
    lr_factor: float = 0.5
    anneal_warmup: int = 2
    anneal_ramp: int = 3
    batch_size: int = 16
    epochs: int = 10
    clip_norm: float = 5.0
    tau: float = 1.0
    val_fraction: float = 0.1
    # seeds
    seed_init: int = 0
    seed_shuffle: int = 0
    seed_dropout: int = 0
    seed_gumbel: int = 0
    # paths
    corpus: str = ""
    test_corpus: str = ""
    checkpoint: str = ""
    log: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"{key}: {why}")

        if self.mode not in MODES:
            bad("mode", f"must be one of {', '.join(MODES)}")
        if self.ws < 0:
            bad("ws", "must be >= 0")
        if self.fw != ALL and (not isinstance(self.fw, int) or self.fw < 0):
            bad("fw", "must be >= 0 or 'all'")
        if self.n_labels < 2:
            bad("n_labels", "must be >= 2")
        if self.input_mode not in ("tokens", "features"):
            bad("input_mode", "must be 'tokens' or 'features'")
        if self.input_mode == "tokens" and self.vocab_size < 1:
            bad("vocab_size", "must be >= 1")
        if self.input_mode == "features" and self.feature_dim < 1:
            bad("feature_dim", "must be >= 1 in feature mode")
        for key in ("d_emb", "d_hidden", "d_attn", "d_mlp", "batch_size", "anneal_ramp"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("epochs", "anneal_warmup"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", "must lie in [0, 1)")
        if self.lr <= 0:
            bad("lr", "must be > 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            bad("milestones", "must be strictly increasing")
        if self.lr_factor <= 0:
            bad("lr_factor", "must be > 0")
        if self.clip_norm < 0:
            bad("clip_norm", "must be >= 0 (0 disables clipping)")
        if self.tau <= 0:
            bad("tau", "must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            bad("val_fraction", "must lie in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_labels=self.n_labels,
            vocab_size=self.vocab_size,
            d_emb=self.d_emb,
            d_hidden=self.d_hidden,
            d_attn=self.d_attn,
            d_mlp=self.d_mlp,
            use_rnn=self.use_rnn,
            input_mode=self.input_mode,
            feature_dim=self.feature_dim,
            share_params=self.share_params,
            detach_q=self.detach_q,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
        return cls(**{k: _convert(k, v) for k, v in d.items()})

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        if key == "fw":
            return parse_window(value)
        if key == "milestones":
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(int(v) for v in value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes", "on"):
                return True
            if text in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind}") from None


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown key ({path}:{lineno})")
        values[key] = value
    return values


def parse_config(path=None, overrides: Mapping[str, object] | None = None) -> TrainConfig:
    """Defaults, then the file, then ``overrides`` (typically command-line flags)."""
    values: dict[str, object] = {}
    if path:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown key")
        if value is not None:
            values[key] = value
    return TrainConfig.from_dict(values)
