"""Dataclass configs and the key=value config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


@dataclass
class SamplerConfig:
    enabled: bool = True
    M: int = 100
    noise_high: float = 0.5


@dataclass
class SAConfig:
    window: int | None = None  # None -> largest divisor of the grid that is <= 7
    heads: int | None = None  # None -> 4, reduced so each head keeps >= 8 channels when possible
    mlp_ratio: int = 4
    use_rel_pos_bias: bool = True


@dataclass
class MotionConfig:
    enabled: bool = True
    alpha: float = 0.5
    init_std: float = 1e-3


@dataclass
class TAConfig:
    state_dim: int = 16
    expand: int = 2
    dt_rank: int | None = None  # None -> ceil(d_f / 16)
    conv_kernel: int = 4
    dt_min: float = 1e-3
    dt_max: float = 1e-1


@dataclass
class HeadConfig:
    tau_agg: float = 1.0
    tau_cls: float = 0.01


@dataclass
class ModelConfig:
    D: int = 512
    d_f: int = 64
    N_L: int = 2
    T: int = 16
    H: int = 14
    W: int = 14
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sa: SAConfig = field(default_factory=SAConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    ta: TAConfig = field(default_factory=TAConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def window(self) -> int:
        if self.sa.window is not None:
            w = self.sa.window
        else:
            w = min(7, self.H, self.W)
            while self.H % w or self.W % w:
                w -= 1
        return w

    def heads(self) -> int:
        if self.sa.heads is not None:
            return self.sa.heads
        h = 4
        while h > 1 and (self.d_f % h or self.d_f // h < 8):
            h //= 2
        return h

    def dt_rank(self) -> int:
        return self.ta.dt_rank if self.ta.dt_rank is not None else math.ceil(self.d_f / 16)


@dataclass
class DataConfig:
    n_classes: int = 8
    clips_per_class: int = 8
    test_clips_per_class: int = 4
    T: int = 8
    H0: int = 32
    W0: int = 32
    patch: int = 8
    D: int = 32
    sprite: int = 8
    speeds: tuple[float, ...] = (1.0,)
    noise: float = 0.02
    seed: int = 0


@dataclass
class TrainConfig:
    lr_head: float = 1e-4
    lr_backbone: float = 2e-6  # recorded only; the stub encoder has no weights
    weight_decay: float = 0.01
    epochs: int = 60
    max_steps: int | None = None
    batch_size: int = 32
    seed: int = 0
    log_every: int = 10
    grad_clip: float | None = 1.0
    dtype: str = "f32"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Per-protocol schedule presets: epochs, aggregator lr, batch size, sampling switch.
PROTOCOL_DEFAULTS = {
    "zero_shot": {"train.epochs": 5, "train.lr_head": 1e-5, "train.batch_size": 64,
                  "model.sampler.enabled": True},
    "few_shot": {"train.epochs": 60, "train.lr_head": 1e-4, "train.batch_size": 32,
                 "model.sampler.enabled": False},
    "base_to_novel": {"train.epochs": 12, "train.lr_head": 1e-4, "train.batch_size": 32,
                      "model.sampler.enabled": False},
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, current: Any, annotation: str) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(current, bool) or annotation.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    if isinstance(current, tuple) or annotation.startswith("tuple"):
        return tuple(float(x) for x in text.strip("()[]").split(",") if x.strip())
    if isinstance(current, int) or annotation.startswith("int"):
        return int(text)
    if isinstance(current, float) or annotation.startswith("float"):
        return float(text)
    return text


def set_key(cfg: Any, key: str, value: Any) -> None:
    """Set a dotted key such as ``model.sampler.M`` on a nested dataclass."""
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    known = {f.name: f for f in fields(obj)}
    if leaf not in known:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if isinstance(value, str):
        value = _coerce(value, current, str(known[leaf].type))
    elif isinstance(value, list):
        value = tuple(value)
    setattr(obj, leaf, value)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def apply_overrides(cfg: Config, overrides: dict[str, Any]) -> Config:
    for k, v in overrides.items():
        set_key(cfg, k, v)
    return cfg


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    if path is not None:
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            apply_overrides(cfg, _flatten(json.loads(text)))
        else:
            apply_overrides(cfg, parse_text(text))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def config_from_dict(d: dict[str, Any]) -> Config:
    return apply_overrides(Config(), _flatten(d))
