"""Backbone + decoder segmentation model, run configuration, and checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .backbone import Backbone, BackboneConfig
from .decoder import CfpConfig, CfpDecoder
from .errors import ConfigError
from .nn import Module
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor

PRESETS = {"tiny": CfpConfig.tiny, "small": CfpConfig.small}
CONFIG_KEY = "__config__"


class CfpSegmenter(Module):
    """Image (B, 1, H, W) -> per-pixel class logits (B, num_classes, H, W)."""

    def __init__(self, model_cfg: CfpConfig, backbone_cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        if tuple(model_cfg.encoder_channels) != tuple(backbone_cfg.channels):
            raise ConfigError(
                f"decoder encoder_channels {model_cfg.encoder_channels} != backbone channels {backbone_cfg.channels}"
            )
        rng = np.random.default_rng(seed)
        self.model_cfg = model_cfg
        self.backbone_cfg = backbone_cfg
        self.backbone = Backbone(backbone_cfg, rng)
        self.decoder = CfpDecoder(model_cfg, rng)

    def set_rng(self, rng: np.random.Generator | None) -> None:
        self.decoder.rng = rng

    def clamp_(self) -> None:
        for m in self.decoder.attention_modules():
            m.clamp_()

    def forward(self, image: Tensor) -> Tensor:
        pyramid = self.backbone(image)
        return self.decoder(pyramid, out_size=image.shape[2:])


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    manifest: str = "data/manifest.csv"
    out_dir: str = "runs/default"
    preset: str = "tiny"
    model: CfpConfig = field(default_factory=CfpConfig.tiny)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 8
    eval_batch_size: int = 8
    seed: int = 7
    augment: bool = True
    loss: str = "dice_ce"
    max_train_samples: int | None = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.backbone).items()}
        d["optimizer"] = asdict(self.optimizer)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        raw = dict(raw)
        preset = raw.get("preset", "tiny")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        backbone = _strict(BackboneConfig, raw.pop("backbone", {}), "backbone")
        model_raw = dict(raw.pop("model", {}))
        model_raw.setdefault("encoder_channels", list(backbone.channels))
        _reject_unknown(CfpConfig, model_raw, "model")
        try:
            model = PRESETS[preset](**model_raw)
        except TypeError as e:
            raise ConfigError(f"model: {e}") from None
        optimizer = _strict(OptimConfig, raw.pop("optimizer", {}), "optimizer")
        cfg = cls(model=model, backbone=backbone, optimizer=optimizer, **raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.model.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.model.image_size}")

    def build_model(self) -> CfpSegmenter:
        return CfpSegmenter(self.model, self.backbone, seed=self.seed)


def _reject_unknown(cls, raw: dict, section: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown {section} keys: {unknown}")


def _strict(cls, raw: dict, section: str):
    _reject_unknown(cls, raw, section)
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None


def save_model(path, model: CfpSegmenter, config: RunConfig | None = None) -> None:
    """Write parameters (and the config as a u8 tensor) to a CFPC checkpoint."""
    tensors = dict(model.state_dict())
    if config is not None:
        # the output location is not part of the model; leaving it out keeps
        # checkpoints from identical runs in different directories byte-identical
        config = replace(config, out_dir="")
        tensors[CONFIG_KEY] = np.frombuffer(config.to_json().encode("utf-8"), dtype=np.uint8)
    save_checkpoint(path, tensors)


def load_model(path, config: RunConfig | None = None) -> tuple[CfpSegmenter, RunConfig]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = load_checkpoint(path)
    raw = tensors.pop(CONFIG_KEY, None)
    if config is None:
        if raw is None:
            raise ConfigError(f"{path}: checkpoint carries no config; pass one explicitly")
        config = RunConfig.from_dict(json.loads(raw.tobytes().decode("utf-8")))
    model = config.build_model()
    model.load_state_dict(tensors)
    return model, config
