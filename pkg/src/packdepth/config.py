"""Training configuration: dataclass, YAML/JSON file loading and flag overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .depthnet import PackNetConfig
from .losses import LossWeights

CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    # optimisation
    epochs: int = 100
    batch_size: int = 4
    lr_depth: float = 2e-4
    lr_pose: float = 5e-4
    lr_decay_every: int = 40
    lr_decay_factor: float = 2.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    steps_per_epoch: int | None = None
    max_steps: int | None = None
    seed: int = 42
    # objective
    alpha: float = 0.85
    lambda1: float = 0.001
    lambda2: float = 0.05
    scale_decay: float = 2.0
    velocity_supervision: bool = False
    min_depth: float = 0.1
    max_depth: float = 100.0
    # input
    width: int = 640
    height: int = 192
    dataset: str = "synthetic"
    synthetic_frames: int = 200
    synthetic_seed: int = 0
    augment: bool = True
    # depth network
    d_filters: int = 8
    use_pack_unpack: bool = True
    channel_divisor: int = 1
    dropout_rate: float = 0.5
    group_norm_groups: int = 16
    # bookkeeping
    output_dir: str = "runs/default"
    log_every: int = 1
    checkpoint_every: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.lr_depth <= 0 or self.lr_pose <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")
        if self.lr_decay_every <= 0:
            raise ValueError("lr_decay_every must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.width % 32 or self.height % 32:
            raise ValueError(f"resolution {self.width}x{self.height} must be divisible by 32")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version} (expected {CONFIG_VERSION})")
        LossWeights(self.alpha, self.lambda1, self.lambda2, self.scale_decay)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lambda1, self.lambda2, self.scale_decay)

    @property
    def depth_config(self) -> PackNetConfig:
        kwargs = dict(d_filters=self.d_filters, use_pack_unpack=self.use_pack_unpack,
                      dropout_rate=self.dropout_rate, group_norm_groups=self.group_norm_groups)
        if self.channel_divisor > 1:
            return PackNetConfig.tiny(self.channel_divisor, **kwargs)
        return PackNetConfig(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _field_types() -> dict:
    hints = {}
    for f in fields(TrainConfig):
        t = str(f.type)
        if "bool" in t:
            hints[f.name] = bool
        elif "int" in t:
            hints[f.name] = int
        elif "float" in t:
            hints[f.name] = float
        else:
            hints[f.name] = str
    return hints


FIELD_TYPES = _field_types()


def coerce(name: str, value):
    """Convert a raw (string or YAML) value to the type of field ``name``."""
    if name not in FIELD_TYPES:
        raise KeyError(f"unknown config field {name!r}")
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        return None
    kind = FIELD_TYPES[name]
    if kind is bool and isinstance(value, str):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: cannot parse boolean from {value!r}")
    return kind(value)


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a YAML or JSON config file, then apply ``overrides``; unknown keys are rejected."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        raw = json.loads(text) if path.suffix == ".json" else (yaml.safe_load(text) or {})
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
    values = {k: coerce(k, v) for k, v in raw.items()}
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
