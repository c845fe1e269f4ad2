"""Model and training configuration, JSON round-trippable."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dyfadet.detection import CENTER_RADIUS, PostprocessConfig
from dyfadet.errors import ConfigurationError


@dataclass
class ModelConfig:
    in_channels: int = 16
    width: int = 32
    k: int = 3
    window_factor: int = 5
    formation: str = "K"
    gate: str = "relu"
    num_stem: int = 2
    num_down: int = 5
    include_stem_level: bool = False
    head_depth: int = 3
    head_k: int = 3
    num_classes: int = 3
    reg_weight: float = 1.0
    center_radius: float = CENTER_RADIUS
    encoder_type: str = "dyne"
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def validate(self) -> None:
        if self.window_factor < 1:
            raise ConfigurationError("window_factor must be >= 1")
        if self.head_depth < 1:
            raise ConfigurationError("head_depth must be >= 1")
        if self.num_down < 1:
            raise ConfigurationError("num_down must be >= 1")
        if self.formation not in ("K", "C", "CK"):
            raise ConfigurationError(f"unknown formation {self.formation!r}")
        if self.encoder_type not in ("dyne", "conv", "dense_conv"):
            raise ConfigurationError(f"unknown encoder_type {self.encoder_type!r}")

    @property
    def strides(self) -> list[int]:
        base = [1] if self.include_stem_level else []
        return base + [2**i for i in range(1, self.num_down + 1)]

    def level_lengths(self, T: int) -> list[int]:
        return [-(-T // s) for s in self.strides]


@dataclass
class TrainConfig:
    epochs: int = 300
    warmup_epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 2.5e-2
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    batch_size: int = 4
    max_input_length: int = 2304
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.max_input_length < 1:
            raise ConfigurationError("epochs, batch_size and max_input_length must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be in [0, epochs)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is ModelConfig and isinstance(kwargs.get("postprocess"), dict):
        kwargs["postprocess"] = _from_dict(PostprocessConfig, kwargs["postprocess"])
    if cls is TrainConfig and "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    return cls(**kwargs)


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = _from_dict(ModelConfig, data)
    cfg.validate()
    return cfg


def train_config_from_dict(data: dict) -> TrainConfig:
    cfg = _from_dict(TrainConfig, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}``; missing sections keep defaults."""
    if path is None:
        return ModelConfig(), TrainConfig()
    data = json.loads(Path(path).read_text())
    return (
        model_config_from_dict(data.get("model", {})),
        train_config_from_dict(data.get("train", {})),
    )


def config_to_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    out = {"model": asdict(model)}
    if train is not None:
        out["train"] = asdict(train)
    return out
