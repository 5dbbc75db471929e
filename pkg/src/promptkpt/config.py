"""Configuration dataclasses, file loading and dotted-key overrides.

Precedence, lowest to highest: dataclass defaults < config file < CLI flags.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .blocks import ConfigError

CONFIG_ENV = "PROMPTKPT_CONFIG"


@dataclass
class ModelConfig:
    dim: int = 256
    heads: int = 8
    ffn_hidden: int = 1024
    enhancer_layers: int = 6
    object_decoder_layers: int = 2
    keypoint_decoder_layers: int = 4
    num_queries: int = 100
    levels: int = 3
    points: int = 4
    deformable: bool = True
    prompt_class_mask: bool = False
    image_size: int = 64
    text_layers: int = 2
    text_max_len: int = 32
    keypoint_context: str = "name"
    vit_layers: int = 4
    patch_size: int = 16
    prompt_resolution: int = 224
    fourier_bands: int = 8
    fourier_scale: float = 2 * math.pi
    train_keypoint_groups: str = "all"  # "all" queries or only "matched" ones
    residual_init_gain: float = 0.1  # visual encoder, enhancer and decoder branch scale at init


@dataclass
class LossConfig:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_kpt_l1: float = 5.0
    w_oks: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0
    sigma: float = 0.1
    kpt_align_scope: str = "all"  # "all" keypoint rows or the owner's "slice"


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    modality_prob: float = 0.5  # probability of the visual-prompt modality
    flip_prob: float = 0.0
    seed: int = 0
    tau_obj: float = 0.3
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.modality_prob <= 1.0:
            raise ConfigError("train.modality_prob must lie in [0, 1]")
        if not 0.0 < self.tau_obj < 1.0:
            raise ConfigError("train.tau_obj must lie in (0, 1)")


@dataclass
class EvalConfig:
    threshold: float = 0.05
    max_detections: int = 20
    pck_threshold: float = 0.2
    iou_match: float = 0.5
    workers: int = 1


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        cfg = cls()
        for key, value in flatten(data).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    def set(self, dotted: str, value: Any) -> None:
        section, _, name = dotted.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(value, type(current), dotted))

    def validate(self) -> None:
        TrainConfig.__post_init__(self.train)
        if self.model.dim % self.model.heads:
            raise ConfigError("model.dim must be divisible by model.heads")
        if self.model.train_keypoint_groups not in ("all", "matched"):
            raise ConfigError("model.train_keypoint_groups must be 'all' or 'matched'")
        if self.loss.kpt_align_scope not in ("all", "slice"):
            raise ConfigError("loss.kpt_align_scope must be 'all' or 'slice'")
        for layers in ("enhancer_layers", "object_decoder_layers", "keypoint_decoder_layers"):
            if getattr(self.model, layers) < 1:
                raise ConfigError(f"model.{layers} must be >= 1")


SECTIONS = ("model", "loss", "train", "eval")


def _coerce(value, kind, key):
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {key}") from exc


def flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_keys() -> list[str]:
    cfg = Config()
    return sorted(flatten(cfg.to_dict()))


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None,
                base: Config | None = None, sections=None) -> Config:
    """``base`` (default: dataclass defaults), then the file (``path`` or
    ``$PROMPTKPT_CONFIG``), then ``overrides``. With ``sections`` given, keys
    outside those sections are ignored in the file and rejected in overrides."""
    path = path or os.environ.get(CONFIG_ENV)
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    from_file = flatten(data)
    overrides = dict(overrides or {})
    if sections is not None:
        from_file = {k: v for k, v in from_file.items() if k.split(".")[0] in sections}
        bad = [k for k in overrides if k.split(".")[0] not in sections]
        if bad:
            raise ConfigError(f"keys {bad} cannot be changed here (allowed sections: {list(sections)})")
    merged = flatten((base or Config()).to_dict())
    merged.update(from_file)
    merged.update(overrides)
    return Config.from_dict(merged)


def desk_config() -> Config:
    """Small preset used by the overfit experiment and the CLI smoke runs."""
    return Config.from_dict({
        "model": {"dim": 64, "heads": 4, "ffn_hidden": 128, "num_queries": 20,
                  "prompt_resolution": 64, "patch_size": 16,
                  "train_keypoint_groups": "matched"},
        "train": {"lr": 5e-4, "batch_size": 1, "grad_clip": 1.0},
    })
