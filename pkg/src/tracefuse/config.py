"""Training configuration and its flat ``key = value`` file format.

Lines starting with ``#`` are comments.  Every key must be a known field;
values are parsed according to the field's type.  Loss weights use the
keys ``lambda_txt``, ``lambda_mask``, ``lambda_bce`` and ``lambda_dice``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_iters: int = 100
    total_iters: int = 2000
    batch_size: int = 4
    grad_accum_steps: int = 4
    lambda_txt: float = 1.0
    lambda_mask: float = 1.0
    lambda_bce: float = 1.0
    lambda_dice: float = 0.2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    log_every: int = 50
    # model
    image_size: int = 64
    patch_size: int = 8
    model_dim: int = 64
    num_heads: int = 4
    mlp_hidden: int = 128
    trace_channels: int = 16
    trace_depth: int = 4
    content_depth: int = 4
    d_llm: int = 128
    use_trace: bool = True
    decoder: str = "fusion"
    carry_trace: bool = True
    rectify: bool = True
    energy_skip: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "total_iters", "batch_size", "grad_accum_steps", "image_size",
                     "patch_size", "model_dim", "num_heads", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError(f"warmup_iters must lie in [0, total_iters], got {self.warmup_iters}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.decoder not in ("fusion", "single"):
            raise ConfigError(f"decoder must be 'fusion' or 'single', got {self.decoder!r}")
        LossWeights(self.lambda_txt, self.lambda_mask, self.lambda_bce, self.lambda_dice)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_txt, self.lambda_mask, self.lambda_bce, self.lambda_dice)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text.strip("\"'")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        values[key] = _parse(types[key], val, key)
    return replace(base, **values)


def load_config(path=None, env=None) -> TrainConfig:
    """Read a config file (or defaults); ``FORGE_SEED`` overrides ``seed``."""
    cfg = parse_config(Path(path).read_text(encoding="utf-8")) if path else TrainConfig()
    env = os.environ if env is None else env
    if env.get("FORGE_SEED"):
        cfg = replace(cfg, seed=_parse(int, env["FORGE_SEED"], "FORGE_SEED"))
    return cfg
