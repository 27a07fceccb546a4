"""Flat ``key = value`` configuration files.

Every key belongs to exactly one of :class:`BackboneConfig`,
:class:`ModelConfig`, :class:`TrainConfig` or :class:`DataConfig`; an
unknown key is an error so typos do not pass silently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 96
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    split_l: int = 4
    feature_dim: int = 128
    pool: str = "avg"

    def __post_init__(self):
        n = len(self.stage_channels)
        if n < 1:
            raise ConfigError("stage_channels must list at least one stage")
        if not 1 <= self.split_l <= n:
            raise ConfigError(f"split_l={self.split_l} outside 1..{n}")
        if self.input_side % (2 ** (self.split_l + 1)):
            raise ConfigError(f"input_side {self.input_side} is not divisible by 2^{self.split_l + 1}")
        if self.grid_side < 2:
            raise ConfigError(f"split_l={self.split_l} leaves a {self.grid_side}x{self.grid_side} grid (need >= 2)")
        if self.input_side % (2 ** (n + 1)):
            raise ConfigError(f"input_side {self.input_side} is not divisible by 2^{n + 1} ({n} stages + stem)")
        if self.pool not in ("avg", "flatten"):
            raise ConfigError(f"pool must be avg or flatten, got {self.pool!r}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def grid_side(self) -> int:
        return self.input_side // 2 ** (self.split_l + 1)

    def stage_side(self, stage: int) -> int:
        """Spatial side after ``stage`` (0 = stem)."""
        return self.input_side // 2 ** (stage + 1)

    @property
    def split_channels(self) -> int:
        return self.stage_channels[self.split_l - 1]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hidden_size: int = 256
    attn_hidden: int = 64
    in_channels: int = 3
    num_classes: int = 8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    window: int = 16
    chunk_stride: int = 8
    eval_stride: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    epochs: tuple = (15, 10, 10)
    bootstrap_ratio: float = 0.3
    bootstrap_mode: str = "topk"
    stage: int = 3
    seed: int = 0
    precision: str = "train"
    align_mode: str = "global_shift"
    max_shift: int = 4
    augment: bool = True
    eval_each_epoch: bool = True
    grad_clip: float = 0.0

    def __post_init__(self):
        if not 0 < self.bootstrap_ratio <= 1:
            raise ConfigError(f"bootstrap_ratio must lie in (0, 1], got {self.bootstrap_ratio}")
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.bootstrap_mode not in ("topk", "soft", "hard"):
            raise ConfigError(f"bootstrap_mode must be topk, soft or hard, got {self.bootstrap_mode!r}")
        if self.align_mode not in ("identity", "global_shift"):
            raise ConfigError(f"align_mode must be identity or global_shift, got {self.align_mode!r}")
        if len(self.epochs) != 3:
            raise ConfigError(f"epochs needs one count per stage (3), got {self.epochs}")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables), got {self.grad_clip}")


@dataclass(frozen=True)
class DataConfig:
    image_side: int = 96
    seq_length: int = 48
    train_per_class: int = 40
    test_per_class: int = 15
    blink_period: int = 8
    duty_cycle: float = 0.5
    noise_sigma: float = 3.0
    jitter: int = 1
    distractor_prob: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, **overrides) -> "RunConfig":
        return from_mapping({**to_mapping(self), **{k: str(v) for k, v in overrides.items()}})


_SECTIONS = {
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _owners() -> dict[str, str]:
    owners = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name == "backbone":
                continue
            owners[f.name] = section
    return owners


KEY_OWNERS = _owners()


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_OWNERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def from_mapping(values: dict[str, str]) -> RunConfig:
    grouped: dict[str, dict] = {name: {} for name in _SECTIONS}
    defaults = {name: cls() for name, cls in _SECTIONS.items()}
    for key, raw in values.items():
        section = KEY_OWNERS.get(key)
        if section is None:
            raise ConfigError(f"unknown key {key!r}")
        grouped[section][key] = _convert(raw, getattr(defaults[section], key), key)
    backbone = BackboneConfig(**grouped["backbone"])
    model = ModelConfig(backbone=backbone, **grouped["model"])
    return RunConfig(model=model, train=TrainConfig(**grouped["train"]), data=DataConfig(**grouped["data"]))


def to_mapping(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for obj in (cfg.model.backbone, cfg.model, cfg.train, cfg.data):
        for f in dataclasses.fields(obj):
            if f.name == "backbone":
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out[f.name] = str(value)
    return out


def dump_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(cfg).items())


def load_config(path) -> RunConfig:
    path = Path(path)
    return from_mapping(parse_text(path.read_text(encoding="utf-8"), str(path)))
