"""Configuration dataclasses and layered loading (defaults < file < env < command line)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

ENV_PREFIX = "DCLR_"


class ConfigError(ValueError):
    """Raised when a configuration value is invalid. The message names the field."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class SynthConfig:
    num_videos: int = 512
    num_scene_classes: int = 8
    num_motion_classes: int = 8
    frames_per_video: int = 24
    spatial_size: int = 64
    sprite_size: int = 10
    noise_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.num_videos < 0:
            raise ConfigError("num_videos", "must be >= 0")
        for name in ("num_scene_classes", "num_motion_classes", "frames_per_video", "spatial_size", "sprite_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.num_scene_classes > 8:
            raise ConfigError("num_scene_classes", "at most 8 scene textures are defined")
        if self.num_motion_classes > 8:
            raise ConfigError("num_motion_classes", "at most 8 motion patterns are defined")
        if self.frames_per_video < 2:
            raise ConfigError("frames_per_video", "need at least 2 frames")
        if self.sprite_size >= self.spatial_size:
            raise ConfigError("sprite_size", "must be smaller than spatial_size")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")


@dataclass
class AugmentConfig:
    crop_size: int = 32
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    def validate(self) -> None:
        if self.crop_size <= 0:
            raise ConfigError("crop_size", "must be positive")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale", "need 0 < lo <= hi <= 1")
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(name, "must be a probability")


@dataclass
class EncoderConfig:
    channel_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    embed_dim: int = 128
    projection_hidden: int = 128
    spatial_strides: list[int] = field(default_factory=lambda: [2, 2, 2, 1])
    temporal_strides: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    norm: str = "batch"
    in_channels: int = 3

    def validate(self) -> None:
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim", "must be positive")
        if self.projection_hidden <= 0:
            raise ConfigError("projection_hidden", "must be positive")
        if not self.channel_widths or any(w <= 0 for w in self.channel_widths):
            raise ConfigError("channel_widths", "need at least one positive width")
        n = len(self.channel_widths)
        if len(self.spatial_strides) != n:
            raise ConfigError("spatial_strides", f"need {n} entries to match channel_widths")
        if len(self.temporal_strides) != n:
            raise ConfigError("temporal_strides", f"need {n} entries to match channel_widths")
        if self.norm not in ("batch", "group", "none"):
            raise ConfigError("norm", "expected one of batch, group, none")


RETRIEVAL_MODES = ("none", "top1", "topk_prior", "topk_uniform")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    temperature: float = 0.1
    lambda_ac: float = 0.5
    topk: int = 5
    queue_size: int = 512
    extractor_update_interval: int = 5
    # None means 20% of epochs
    warmup_epochs: int | None = None
    seed: int = 0
    clip_len: int = 8
    use_vv: bool = False
    use_vs: bool = True
    use_vd: bool = True
    use_sd: bool = True
    same_view: bool = False
    refine: bool = True
    retrieval: str = "topk_prior"
    static_retrieval: bool = False
    lr_schedule: str = "constant"
    checkpoint_every: int = 10

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is None:
            return int(0.2 * self.epochs)
        return self.warmup_epochs

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "need at least 2 videos per batch for negatives")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must be in [0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature", "must be > 0")
        if self.lambda_ac < 0:
            raise ConfigError("lambda_ac", "must be >= 0")
        if self.topk < 1:
            raise ConfigError("topk", "must be >= 1")
        if self.queue_size < 1:
            raise ConfigError("queue_size", "must be >= 1")
        if self.extractor_update_interval < 1:
            raise ConfigError("extractor_update_interval", "must be >= 1")
        if self.warmup_epochs is not None:
            if self.warmup_epochs < 0:
                raise ConfigError("warmup_epochs", "must be >= 0")
            if self.epochs > 0 and self.warmup_epochs >= self.epochs:
                raise ConfigError("warmup_epochs", "must be smaller than epochs")
        if self.clip_len < 1:
            raise ConfigError("clip_len", "must be >= 1")
        if self.retrieval not in RETRIEVAL_MODES:
            raise ConfigError("retrieval", f"expected one of {RETRIEVAL_MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule", "expected constant or cosine")
        if not (self.use_vv or self.use_vs or self.use_vd):
            raise ConfigError("use_vv", "at least one of use_vv/use_vs/use_vd must be enabled")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")


@dataclass
class EvalConfig:
    num_eval_clips: int = 4
    split_seed: int = 0
    test_fraction: float = 0.25
    ks: list[int] = field(default_factory=lambda: [1, 5, 10, 20])

    def validate(self) -> None:
        if self.num_eval_clips < 1:
            raise ConfigError("num_eval_clips", "must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must be in (0, 1)")


@dataclass
class Config:
    data: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for f in fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict[str, Any]) -> str:
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value: Any, current: Any, name: str) -> Any:
    """Convert a raw (possibly string) override to the type of the current value."""
    if isinstance(value, str):
        if isinstance(current, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(name, f"cannot parse {value!r} as bool")
        if isinstance(current, (int, float, list, tuple)) or current is None:
            try:
                value = yaml.safe_load(value)
            except yaml.YAMLError as e:
                raise ConfigError(name, f"cannot parse {value!r}") from e
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(name, f"expected bool, got {value!r}")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and not isinstance(current, bool) and not isinstance(value, int):
        raise ConfigError(name, f"expected int, got {value!r}")
    if isinstance(current, tuple):
        return tuple(value)
    return value


def apply_overrides(cfg: Config, overrides: dict[str, Any]) -> Config:
    """Apply dotted-key overrides such as ``{"train.epochs": 3}`` in place."""
    for key, value in overrides.items():
        section_name, _, attr = key.partition(".")
        if not attr:
            raise ConfigError(key, "override keys must look like section.field")
        section = getattr(cfg, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(key, f"unknown section {section_name!r}")
        if attr not in {f.name for f in fields(section)}:
            raise ConfigError(key, "unknown field")
        setattr(section, attr, _coerce(value, getattr(section, attr), key))
    return cfg


def _flatten(doc: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(str(section), "expected a mapping of field: value")
        for k, v in body.items():
            out[f"{section}.{k}"] = v
    return out


def env_overrides(environ: dict[str, str] | None = None) -> dict[str, Any]:
    """``DCLR_TRAIN__EPOCHS=5`` -> ``{"train.epochs": "5"}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX) and "__" in k:
            section, _, attr = k[len(ENV_PREFIX):].lower().partition("__")
            out[f"{section}.{attr}"] = v
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    environ: dict[str, str] | None = None,
) -> Config:
    cfg = Config()
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(str(path), "config file must be a mapping")
        doc.pop("ablate", None)
        apply_overrides(cfg, _flatten(doc))
    apply_overrides(cfg, env_overrides(environ))
    apply_overrides(cfg, overrides or {})
    return cfg.validate()


def config_from_dict(d: dict[str, Any]) -> Config:
    cfg = Config()
    apply_overrides(cfg, _flatten(d))
    return cfg.validate()
