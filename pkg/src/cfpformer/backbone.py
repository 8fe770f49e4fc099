"""Small trainable CNN encoder producing a 4-level feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Module, split_rng
from .tensor import Tensor, permute


@dataclass
class BackboneConfig:
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 2, 1)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ConfigError("backbone needs exactly 4 stages (channels and blocks)")
        if min(self.channels) < 1 or min(self.blocks) < 0:
            raise ConfigError(f"invalid backbone dims {self.channels} / {self.blocks}")


@dataclass
class FeaturePyramid:
    """Encoder features, highest resolution first, each level NCHW."""

    levels: list

    def validate(self) -> None:
        if len(self.levels) != 4:
            raise DimensionError(f"feature pyramid needs 4 levels, got {len(self.levels)}")
        for i in range(1, 4):
            prev, cur = self.levels[i - 1].shape, self.levels[i].shape
            if cur[0] != prev[0] or cur[2] * 2 != prev[2] or cur[3] * 2 != prev[3]:
                raise DimensionError(f"pyramid level {i + 1} {cur} is not half of level {i} {prev}")

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


class ConvNormAct(Module):
    """3x3 conv, channel layer-norm, GELU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.norm = LayerNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        y = permute(self.conv(x), (0, 2, 3, 1))
        y = F.gelu(self.norm(y))
        return permute(y, (0, 3, 1, 2))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        rng = split_rng(rng)
        ch = cfg.channels
        self.stem = ConvNormAct(cfg.in_channels, ch[0], rng)
        for i in range(4):
            if i > 0:
                setattr(self, f"down{i}", ConvNormAct(ch[i - 1], ch[i], rng, stride=2))
            for j in range(cfg.blocks[i]):
                setattr(self, f"stage{i + 1}_{j}", ConvNormAct(ch[i], ch[i], rng))

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"backbone expects (B, {self.cfg.in_channels}, H, W), got {image.shape}")
        H, W = image.shape[2:]
        if H % 16 or W % 16:
            raise DimensionError(f"backbone input extents must be divisible by 16, got {H}x{W}")
        x = self.stem(image)
        levels = []
        for i in range(4):
            if i > 0:
                x = getattr(self, f"down{i}")(x)
            for j in range(self.cfg.blocks[i]):
                x = getattr(self, f"stage{i + 1}_{j}")(x)
            levels.append(x)
        return FeaturePyramid(levels)
