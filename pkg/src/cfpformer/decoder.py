"""Cross feature-pyramid transformer decoder.

The decoder starts from the coarsest encoder level, runs the CFP blocks of
each stage, and upsamples 2x into the next finer stage.  Inside every block
the matching encoder level is patch-embedded to the decoder width (feature
re-encoding) and added to the key and value projections.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .attention import AttentionConfig, GaussianAttention
from .backbone import FeaturePyramid
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, split_rng
from .tensor import Tensor, permute

UPSAMPLING = ("bilinear", "transpose_conv")


@dataclass
class CfpConfig:
    stage_blocks: tuple = (1, 1, 3, 1)
    heads: tuple = (2, 4, 8, 16)
    mlp_ratio: float = 3.0
    drop_path_rate: float = 0.15
    patch_size: int = 1
    upsampling: str = "bilinear"
    use_fre: bool = True
    use_pyramid_connection: bool = True
    attention_variant: str = "axial_gaussian"
    softmax_base: str = "two"
    decay_family: str = "gaussian"
    num_classes: int = 4
    widths: tuple = (16, 32, 64, 128)
    encoder_channels: tuple = (16, 32, 64, 128)
    image_size: int = 64
    lepe_kernel: int = 3

    def __post_init__(self):
        for name in ("stage_blocks", "heads", "widths", "encoder_channels"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {val}")
            setattr(self, name, val)
        for w, h in zip(self.widths, self.heads):
            if w % h:
                raise ConfigError(f"decoder width {w} not divisible by {h} heads")
        if self.upsampling not in UPSAMPLING:
            raise ConfigError(f"upsampling must be one of {UPSAMPLING}, got {self.upsampling!r}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.patch_size < 1 or self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size must be a power of two, got {self.patch_size}")
        if self.use_pyramid_connection and not self.use_fre:
            raise ConfigError(
                "pyramid connection without feature re-encoding: encoder features cannot be "
                "fused into K/V without re-encoding (the 'w/o FRE' ablation fails by construction)"
            )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @classmethod
    def tiny(cls, **overrides) -> "CfpConfig":
        return cls(**{**dict(stage_blocks=(1, 1, 3, 1), mlp_ratio=3.0, heads=(2, 4, 8, 16), drop_path_rate=0.15), **overrides})

    @classmethod
    def small(cls, **overrides) -> "CfpConfig":
        return cls(**{**dict(stage_blocks=(2, 2, 6, 2), mlp_ratio=3.0, heads=(4, 4, 8, 16), drop_path_rate=0.20), **overrides})

    def replace(self, **changes) -> "CfpConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def fre_level(self, stage: int) -> int | None:
        """Pyramid level feeding decoder stage ``stage`` (0 = finest), or None."""
        if not self.use_pyramid_connection:
            return None
        level = stage - int(math.log2(self.patch_size))
        return level if level >= 0 else None


class PatchEmbed(Module):
    """Non-overlapping P x P patchify + linear projection: NCHW -> (B, H/P, W/P, D)."""

    def __init__(self, in_ch: int, out_dim: int, patch: int, rng: np.random.Generator,
                 zero: bool = False, name: str = "feature"):
        super().__init__()
        self.patch = patch
        self.name = name
        self.proj = Conv2d(in_ch, out_dim, patch, rng, stride=patch, zero=zero)

    def forward(self, feat: Tensor) -> Tensor:
        H, W = feat.shape[2:]
        if H % self.patch or W % self.patch:
            raise DimensionError(f"patch size {self.patch} does not divide {self.name} extents {H}x{W}")
        return permute(self.proj(feat), (0, 2, 3, 1))


def patch_embed(feat: Tensor, weight: Tensor, bias: Tensor | None, P: int) -> Tensor:
    H, W = feat.shape[2:]
    if H % P or W % P:
        raise DimensionError(f"patch size {P} does not divide feature extents {H}x{W}")
    return permute(F.conv2d(feat, weight, bias, stride=P), (0, 2, 3, 1))


class FeatureReencoder(Module):
    """Patch-embeds an encoder level to the decoder width for fusion into K/V."""

    def __init__(self, enc_ch: int, dim: int, patch: int, rng: np.random.Generator, zero: bool = False,
                 level: int = 0):
        super().__init__()
        self.embed = PatchEmbed(enc_ch, dim, patch, rng, zero=zero, name=f"pyramid level {level + 1}")

    def forward(self, f_enc: Tensor) -> Tensor:
        return self.embed(f_enc)

    def fuse(self, kv: Tensor, f_enc: Tensor) -> Tensor:
        e = self.embed(f_enc)
        if e.shape != kv.shape:
            raise ConfigError(
                f"re-encoded feature {e.shape} does not match K/V {kv.shape}; encoder features must "
                "be re-encoded to the decoder grid (see the 'w/o FRE' ablation)"
            )
        return kv + e


def fre_fuse(kv: Tensor, f_enc: Tensor, reencoder: FeatureReencoder) -> Tensor:
    return reencoder.fuse(kv, f_enc)


class Mlp(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class CfpBlock(Module):
    """Pre-norm transformer block with re-encoded encoder features in K/V."""

    def __init__(self, dim: int, heads: int, cfg: CfpConfig, rng: np.random.Generator,
                 enc_ch: int | None = None, grid: tuple = (16, 16), drop_path: float = 0.0, level: int = 0):
        super().__init__()
        rng = split_rng(rng)
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim)
        self.attn = GaussianAttention(
            AttentionConfig(dim, heads, cfg.attention_variant, cfg.decay_family, cfg.softmax_base,
                            cfg.lepe_kernel, grid),
            rng,
        )
        self.proj = Linear(dim, dim, rng)
        self.fre = FeatureReencoder(enc_ch, dim, cfg.patch_size, rng, level=level) if enc_ch else None
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, cfg.mlp_ratio, rng)

    def forward(self, x: Tensor, f_enc: Tensor | None = None, rng: np.random.Generator | None = None) -> Tensor:
        enc = None
        if self.fre is not None:
            if f_enc is None:
                raise DimensionError("block has a pyramid connection but no encoder feature was given")
            enc = self.fre(f_enc)
        h = self.proj(self.attn(self.norm1(x), enc))
        x = x + F.drop_path(h, self.drop_path, self.training, rng)
        h = self.mlp(self.norm2(x))
        return x + F.drop_path(h, self.drop_path, self.training, rng)


class Upsample(Module):
    """2x upsampling between decoder stages, also mapping width ``dim_in`` -> ``dim_out``."""

    def __init__(self, mode: str, dim_in: int, dim_out: int, rng: np.random.Generator):
        super().__init__()
        self.mode = mode
        if mode == "bilinear":
            # 1x1 projection commutes with bilinear resampling, so project at low resolution
            self.proj = Linear(dim_in, dim_out, rng)
        else:
            self.deconv = ConvTranspose2d(dim_in, dim_out, 2, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "bilinear":
            y = permute(self.proj(x), (0, 3, 1, 2))
            y = F.bilinear_upsample_2x(y)
        else:
            y = self.deconv(permute(x, (0, 3, 1, 2)))
        return permute(y, (0, 2, 3, 1))


class CfpDecoder(Module):
    def __init__(self, cfg: CfpConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        rng = split_rng(rng)
        W, E = cfg.widths, cfg.encoder_channels
        self.input_embed = PatchEmbed(E[3], W[3], 1, rng, name="bottleneck level")
        total = sum(cfg.stage_blocks)
        rates = np.linspace(0.0, cfg.drop_path_rate, total) if total > 1 else np.array([cfg.drop_path_rate])
        depth = 0
        for stage in (3, 2, 1, 0):
            side = cfg.image_size >> stage
            level = cfg.fre_level(stage)
            enc_ch = E[level] if level is not None else None
            for j in range(cfg.stage_blocks[stage]):
                blk = CfpBlock(W[stage], cfg.heads[stage], cfg, rng, enc_ch=enc_ch, grid=(side, side),
                               drop_path=float(rates[depth]), level=level or 0)
                setattr(self, f"stage{stage + 1}_{j}", blk)
                depth += 1
            if stage > 0:
                setattr(self, f"up{stage + 1}", Upsample(cfg.upsampling, W[stage], W[stage - 1], rng))
        self.head_norm = LayerNorm(W[0])
        self.head = Linear(W[0], cfg.num_classes, rng)
        # drop-path stream; spawned last so parameter init does not depend on it.
        # The trainer replaces it with a per-epoch stream.
        self.rng = split_rng(rng)

    def blocks(self, stage: int) -> list:
        return [getattr(self, f"stage{stage + 1}_{j}") for j in range(self.cfg.stage_blocks[stage])]

    def forward(self, pyramid: FeaturePyramid, out_size: tuple | None = None) -> Tensor:
        pyramid.validate()
        cfg = self.cfg
        for i, lvl in enumerate(pyramid.levels):
            if lvl.shape[1] != cfg.encoder_channels[i]:
                raise ConfigError(
                    f"pyramid level {i + 1} has {lvl.shape[1]} channels, decoder expects {cfg.encoder_channels[i]}"
                )
        x = self.input_embed(pyramid[3])
        for stage in (3, 2, 1, 0):
            level = cfg.fre_level(stage)
            f = pyramid[level] if level is not None else None
            for blk in self.blocks(stage):
                x = blk(x, f, self.rng)
            if stage > 0:
                x = getattr(self, f"up{stage + 1}")(x)
        logits = permute(self.head(self.head_norm(x)), (0, 3, 1, 2))
        if out_size is not None and tuple(out_size) != logits.shape[2:]:
            logits = F.resize_bilinear(logits, *out_size)
        return logits

    def attention_modules(self) -> list:
        return [m for m in self.modules() if isinstance(m, GaussianAttention)]
