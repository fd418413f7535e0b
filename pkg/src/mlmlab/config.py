"""Run configuration: plain-text `key = value` files, validation, canonical form.

Lines are `key = value`, `#` starts a comment, lists are comma-separated
(`gua_layers = 1,2`).  Unknown keys, malformed values, missing required keys
and invariant violations are rejected with the offending key and line number.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ModelConfig", "TrainConfig", "Config", "ConfigError",
           "parse_config_text", "load_config", "canonical_text"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int
    hidden: int
    ffn: int
    heads: int
    head_size: int
    vocab_size: int
    max_seq_len: int
    ln_placement: str = "post"          # "post" (residual then LN) or "pre"
    decoder_layers: int = 0
    gua_layers: tuple[int, ...] = ()    # 1-based decoder layer indices
    gua_rates: tuple[float, ...] = ()   # cumulative unmask fractions
    mix_decoder_prob: float = 0.8

    def unmask_schedule(self) -> tuple[tuple[int, float], ...]:
        return tuple(zip(self.gua_layers, self.gua_rates))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 100
    seq_len: int = 0                    # 0 = use max_seq_len
    lr: float = 1e-3
    warmup_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    dtype: str = "f32"                  # f32 trains, f64 gradient-checks
    attn_dropout: float = 0.0
    hidden_dropout: float = 0.0
    checkpoint_every: int = 0           # 0 = final checkpoint only

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass(frozen=True)
class Config:
    model: ModelConfig
    train: TrainConfig

    def effective_seq_len(self) -> int:
        return self.train.seq_len or self.model.max_seq_len


# key -> (target, converter name). Required keys have no default in the dataclass.
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_REQUIRED = {"encoder_layers", "hidden", "ffn", "heads", "head_size",
             "vocab_size", "max_seq_len"}
_INT_KEYS = {"encoder_layers", "hidden", "ffn", "heads", "head_size",
             "vocab_size", "max_seq_len", "decoder_layers", "batch_size",
             "steps", "seq_len", "checkpoint_every"}
_FLOAT_KEYS = {"mix_decoder_prob", "lr", "warmup_frac", "adam_beta1",
               "adam_beta2", "adam_eps", "weight_decay", "attn_dropout",
               "hidden_dropout"}
_STR_KEYS = {"ln_placement", "dtype"}
_INT_LIST_KEYS = {"gua_layers"}
_FLOAT_LIST_KEYS = {"gua_rates"}


def _convert(key: str, raw: str, line: int):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _STR_KEYS:
            return raw
        if key in _INT_LIST_KEYS:
            return tuple(int(p) for p in raw.split(",") if p.strip() != "") if raw else ()
        if key in _FLOAT_LIST_KEYS:
            return tuple(float(p) for p in raw.split(",") if p.strip() != "") if raw else ()
    except ValueError:
        raise ConfigError(f"line {line}: bad value for key {key!r}: {raw!r}") from None
    raise AssertionError(key)


def parse_config_text(text: str, source: str = "<string>") -> Config:
    values: dict[str, object] = {}
    lines_seen: dict[str, int] = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {rawline!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _MODEL_KEYS | _TRAIN_KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in lines_seen:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r} "
                              f"(first at line {lines_seen[key]})")
        lines_seen[key] = lineno
        values[key] = _convert(key, raw, lineno)

    missing = _REQUIRED - values.keys()
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(sorted(missing))}")

    model = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
    train = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    cfg = Config(model, train)
    _validate(cfg, lines_seen, source)
    return cfg


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def _err(source: str, lines: dict[str, int], key: str, msg: str) -> ConfigError:
    at = f" (line {lines[key]})" if key in lines else ""
    return ConfigError(f"{source}: key {key!r}{at}: {msg}")


def _validate(cfg: Config, lines: dict[str, int], source: str) -> None:
    m, t = cfg.model, cfg.train
    if m.encoder_layers < 0:
        raise _err(source, lines, "encoder_layers", "must be >= 0")
    if m.decoder_layers < 0:
        raise _err(source, lines, "decoder_layers", "must be >= 0")
    for key in ("hidden", "ffn", "heads", "head_size"):
        if getattr(m, key) < 1:
            raise _err(source, lines, key, "must be >= 1")
    if m.heads * m.head_size != m.hidden:
        raise ConfigError(
            f"{source}: keys 'heads'*'head_size' must equal 'hidden': "
            f"{m.heads}*{m.head_size} != {m.hidden}")
    if m.vocab_size <= 5:
        raise _err(source, lines, "vocab_size", "must exceed the 5 reserved ids")
    if m.max_seq_len < 3:
        raise _err(source, lines, "max_seq_len", "must be >= 3 ([CLS] x [SEP])")
    if m.ln_placement not in ("post", "pre"):
        raise _err(source, lines, "ln_placement", "must be 'post' or 'pre'")
    if len(m.gua_layers) != len(m.gua_rates):
        raise ConfigError(f"{source}: 'gua_layers' and 'gua_rates' must have equal length")
    if m.gua_layers:
        if m.decoder_layers == 0:
            raise _err(source, lines, "gua_layers", "schedule given but decoder_layers = 0")
        if any(not 1 <= k <= m.decoder_layers for k in m.gua_layers):
            raise _err(source, lines, "gua_layers",
                       f"indices must lie in [1, {m.decoder_layers}] (1-based)")
        if any(b <= a for a, b in zip(m.gua_layers, m.gua_layers[1:])):
            raise _err(source, lines, "gua_layers", "indices must be strictly increasing")
        if any(not 0.0 <= r <= 1.0 for r in m.gua_rates):
            raise _err(source, lines, "gua_rates", "rates must lie in [0, 1]")
        if any(b < a for a, b in zip(m.gua_rates, m.gua_rates[1:])):
            raise _err(source, lines, "gua_rates", "rates must be non-decreasing")
        if m.gua_rates[-1] != 1.0:
            raise _err(source, lines, "gua_rates", "final rate must be 1.0 (full unmasking)")
    if not 0.0 <= m.mix_decoder_prob <= 1.0:
        raise _err(source, lines, "mix_decoder_prob", "must lie in [0, 1]")
    if t.batch_size < 1:
        raise _err(source, lines, "batch_size", "must be >= 1")
    if t.steps < 1:
        raise _err(source, lines, "steps", "must be >= 1")
    if t.seq_len and not 3 <= t.seq_len <= m.max_seq_len:
        raise _err(source, lines, "seq_len", f"must lie in [3, {m.max_seq_len}]")
    if t.lr <= 0 or not math.isfinite(t.lr):
        raise _err(source, lines, "lr", "must be positive and finite")
    if not 0.0 <= t.warmup_frac < 1.0:
        raise _err(source, lines, "warmup_frac", "must lie in [0, 1)")
    for key in ("adam_beta1", "adam_beta2"):
        if not 0.0 <= getattr(t, key) < 1.0:
            raise _err(source, lines, key, "must lie in [0, 1)")
    if t.adam_eps <= 0:
        raise _err(source, lines, "adam_eps", "must be positive")
    if t.weight_decay < 0:
        raise _err(source, lines, "weight_decay", "must be >= 0")
    if t.dtype not in ("f32", "f64"):
        raise _err(source, lines, "dtype", "must be 'f32' or 'f64'")
    for key in ("attn_dropout", "hidden_dropout"):
        if not 0.0 <= getattr(t, key) < 1.0:
            raise _err(source, lines, key, "must lie in [0, 1)")
    if t.checkpoint_every < 0:
        raise _err(source, lines, "checkpoint_every", "must be >= 0")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def canonical_text(cfg: Config) -> str:
    """Stable serialisation: every key, sorted, one per line. Reparses to an
    equal Config, so checkpoints embed exactly this."""
    pairs = {}
    for f in dataclasses.fields(ModelConfig):
        pairs[f.name] = getattr(cfg.model, f.name)
    for f in dataclasses.fields(TrainConfig):
        pairs[f.name] = getattr(cfg.train, f.name)
    return "".join(f"{k} = {_fmt(pairs[k])}\n" for k in sorted(pairs))
