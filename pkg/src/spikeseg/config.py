"""Experiment configuration as flat ``section.key = value`` text.

Every field has a default, unknown keys are rejected, and ``to_text`` emits
the fully resolved config in a form ``from_text`` reads back unchanged.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import get_type_hints

from .errors import ConfigurationError


@dataclass
class ModelConfig:
    arch: str = "deeplab"  # deeplab | fcn
    mode: str = "spiking"  # spiking | ann
    width: float = 1.0
    dilation: int = 2
    leak: float = 0.99
    threshold: float = 1.0
    init_seed: int = 0


@dataclass
class DataConfig:
    root: str = ""  # dataset directory; empty means generate synthetic data in memory
    train_split: str = "train"
    eval_split: str = "eval"
    encoder: str = "poisson"  # poisson | dvs (dvs datasets carry their own frames)
    num_classes: int = 3
    image_size: int = 32
    channels: int = 1
    num_train: int = 400
    num_eval: int = 100
    shapes_min: int = 1
    shapes_max: int = 3
    pixel_noise: float = 0.05
    frames: int = 8  # synthetic event data
    window_us: int = 50_000
    seed: int = 0


@dataclass
class TrainSection:
    timesteps: int = 20
    lr: float = 3e-3
    batch_size: int = 16
    epochs: int = 60
    lr_decay: float = 10.0
    milestone: float = 0.5
    seed: int = 0
    grad_clip: float = 0.0
    target_miou: float = 0.0


@dataclass
class ConvertSection:
    mode: str = "layerwise"  # layerwise | channelwise
    percentile: float = 99.7
    calib_samples: int = 64


@dataclass
class EvalSection:
    sweep_steps: tuple[int, ...] = (8, 32, 128, 512)
    sigmas: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3)
    time_chunk: int = 32


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    convert: ConvertSection = field(default_factory=ConvertSection)
    eval: EvalSection = field(default_factory=EvalSection)

    _CHOICES = {
        "model.arch": ("deeplab", "fcn"),
        "model.mode": ("spiking", "ann"),
        "data.encoder": ("poisson", "dvs"),
        "convert.mode": ("layerwise", "channelwise"),
    }

    # -- access by dotted key

    def keys(self) -> list[str]:
        return [f"{s.name}.{f.name}" for s in dataclasses.fields(self) for f in dataclasses.fields(getattr(self, s.name))]

    def _locate(self, key: str):
        section, _, name = key.partition(".")
        sec = getattr(self, section, None) if section in {s.name for s in dataclasses.fields(self)} else None
        if sec is None or name not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigurationError(f"unknown config key {key!r}")
        return sec, name

    def get(self, key: str):
        sec, name = self._locate(key)
        return getattr(sec, name)

    def set(self, key: str, raw) -> None:
        sec, name = self._locate(key)
        kind = get_type_hints(type(sec))[name]
        value = _coerce(key, kind, raw)
        if key in self._CHOICES and value not in self._CHOICES[key]:
            raise ConfigurationError(f"{key} must be one of {self._CHOICES[key]}, got {value!r}")
        setattr(sec, name, value)

    def update(self, pairs) -> "ExperimentConfig":
        for key, raw in pairs:
            self.set(key, raw)
        self.validate()
        return self

    def validate(self) -> None:
        for key in self._CHOICES:
            if self.get(key) not in self._CHOICES[key]:
                raise ConfigurationError(f"{key} must be one of {self._CHOICES[key]}")
        positive = ["model.width", "model.threshold", "data.num_classes", "data.image_size", "data.channels",
                    "data.frames", "data.window_us", "train.timesteps", "train.lr", "train.batch_size", "train.epochs", "eval.time_chunk"]
        for key in positive:
            if self.get(key) <= 0:
                raise ConfigurationError(f"{key} must be positive")
        if not 0 <= self.model.leak <= 1:
            raise ConfigurationError("model.leak must be in [0, 1]")
        if self.data.num_classes < 2:
            raise ConfigurationError("data.num_classes must be >= 2")

    # -- text form

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.get(k))}\n" for k in self.keys())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls().update(parse_pairs(text))


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {n}: expected 'key = value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, kind, raw):
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("str", str):
            return str(raw)
        if kind in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return str(raw).lower() in ("true", "1")
        item = kind.__args__[0]
        if isinstance(raw, (tuple, list)):
            return tuple(item(v) for v in raw)
        parts = [p.strip() for p in str(raw).split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None
