"""Distance-decay attention: decay masks, axial and full Gaussian attention, MHSA.

Masks live in the log domain and are added to the attention scores before the
softmax, so a mask entry ``m`` scales the unnormalized weight by ``exp(m)``
(or ``2**m`` with the base-two softmax).

Axial attention runs a row pass (each of the H rows attends over its W
positions, modulated by the W x W mask) and then a column pass over the row
output (H x H mask).  Per image and head that forms ``HW(W + H)`` scores
instead of ``(HW)**2``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError, NumericError
from .nn import DepthwiseConv, Linear, Module, Parameter
from .tensor import Tensor, grad_enabled, matmul, mul, permute, reshape

FAMILIES = ("gaussian", "exponential")
VARIANTS = ("axial_gaussian", "full_gaussian", "mhsa")
SIGMA_MIN = 1e-3


# -- masks --------------------------------------------------------------------

@lru_cache(maxsize=128)
def _axis_sq_dist(n: int) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    d = (idx[:, None] - idx[None, :]) ** 2
    d.setflags(write=False)
    return d


@lru_cache(maxsize=64)
def _grid_sq_dist(h: int, w: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(h * w), w)
    d = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    d = d.astype(np.float64)
    d.setflags(write=False)
    return d


def _check_param(family: str, param: float) -> None:
    if family == "gaussian":
        if not param > 0:
            raise ConfigError(f"gaussian decay needs sigma > 0, got {param}")
    elif family == "exponential":
        if not 0 < param < 1:
            raise ConfigError(f"exponential decay needs 0 < gamma < 1, got {param}")
    else:
        raise ConfigError(f"unknown decay family {family!r}; expected one of {FAMILIES}")


def _log_decay(sq_dist: np.ndarray, family: str, param: float) -> np.ndarray:
    if family == "gaussian":
        return -sq_dist / (2.0 * param * param)
    return np.sqrt(sq_dist) * math.log(param)


def build_axis_mask(extent: int, family: str, param: float) -> np.ndarray:
    """Log-domain (extent x extent) decay mask for one axis.

    gaussian: ``-(n - m)**2 / (2 sigma**2)``; exponential: ``|n - m| * ln(gamma)``.
    """
    if extent < 1:
        raise DimensionError(f"mask extent must be >= 1, got {extent}")
    _check_param(family, param)
    return _log_decay(_axis_sq_dist(extent), family, param)


def build_grid_mask(h: int, w: int, family: str, param: float) -> np.ndarray:
    """Log-domain (HW x HW) mask over 2-D Euclidean token distances (row-major tokens)."""
    if h < 1 or w < 1:
        raise DimensionError(f"grid must be at least 1x1, got {h}x{w}")
    _check_param(family, param)
    return _log_decay(_grid_sq_dist(h, w), family, param)


def default_gammas(num_heads: int) -> np.ndarray:
    """Fixed per-head decay rates ``1 - 2**-(3 + h)``."""
    return 1.0 - 2.0 ** (-(3.0 + np.arange(num_heads)))


@dataclass
class DecayMask:
    mask_h: np.ndarray  # (heads, H, H), log domain
    mask_w: np.ndarray  # (heads, W, W), log domain
    family: str
    params: np.ndarray  # per-head sigma or gamma

    def linear(self) -> tuple[np.ndarray, np.ndarray]:
        return np.exp(self.mask_h), np.exp(self.mask_w)


# -- score counting -------------------------------------------------------------

class ScoreCounter:
    """Accumulates the number of (mask-modulated) attention score entries formed."""

    def __init__(self):
        self.entries = 0
        self.by_pass: dict[str, int] = {}

    def add(self, name: str, n: int) -> None:
        self.entries += n
        self.by_pass[name] = self.by_pass.get(name, 0) + n


_counters: list[ScoreCounter] = []


@contextlib.contextmanager
def count_scores():
    counter = ScoreCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(name: str, scores: Tensor) -> None:
    if not np.isfinite(scores.data.sum()):
        raise NumericError(f"non-finite attention scores in the {name}", op=name)
    for c in _counters:
        c.add(name, scores.size)


# -- functional cores -------------------------------------------------------------

def split_heads(t: Tensor, heads: int) -> Tensor:
    """(B, H, W, D) -> (B, heads, H, W, D // heads)."""
    B, H, W, D = t.shape
    return permute(reshape(t, (B, H, W, heads, D // heads)), (0, 3, 1, 2, 4))


def merge_heads(t: Tensor) -> Tensor:
    B, h, H, W, d = t.shape
    return reshape(permute(t, (0, 2, 3, 1, 4)), (B, H, W, h * d))


def _scores(q: Tensor, k_t: Tensor, scale: float, mask: Tensor | None, name: str) -> Tensor:
    s = mul(matmul(q, k_t), scale)
    if mask is not None:
        s = s + mask
    _record(name, s)
    return s


def axial_core(q: Tensor, k: Tensor, v: Tensor, mask_h: Tensor | None, mask_w: Tensor | None,
               base: str = "two", scale: float | None = None) -> Tensor:
    """Row-then-column attention on (B, heads, H, W, d) tensors.

    ``mask_h`` is (heads, H, H) and ``mask_w`` is (heads, W, W), log domain.
    """
    B, h, H, W, d = q.shape
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    if mask_w is not None and mask_w.shape[-2:] != (W, W):
        raise DimensionError(f"row mask {mask_w.shape} does not match grid width {W}")
    if mask_h is not None and mask_h.shape[-2:] != (H, H):
        raise DimensionError(f"column mask {mask_h.shape} does not match grid height {H}")
    # row pass: attend along W inside each row
    mw = None if mask_w is None else reshape(mask_w, (h, 1, W, W))
    s_r = _scores(q, permute(k, (0, 1, 2, 4, 3)), scale, mw, "row pass")
    v_w = matmul(F.softmax_rows(s_r, base), v)
    # column pass: attend along H inside each column, consuming the row output
    qc = permute(q, (0, 1, 3, 2, 4))
    kc_t = permute(k, (0, 1, 3, 4, 2))
    vc = permute(v_w, (0, 1, 3, 2, 4))
    mh = None if mask_h is None else reshape(mask_h, (h, 1, H, H))
    s_c = _scores(qc, kc_t, scale, mh, "column pass")
    out = matmul(F.softmax_rows(s_c, base), vc)
    return permute(out, (0, 1, 3, 2, 4))


def full_core(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None, base: str = "two",
              scale: float | None = None) -> Tensor:
    """Token-to-token attention on (B, heads, H, W, d); ``mask`` is (heads, HW, HW)."""
    B, h, H, W, d = q.shape
    N = H * W
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    if mask is not None and mask.shape[-2:] != (N, N):
        raise DimensionError(f"grid mask {mask.shape} does not match {N} tokens")
    qt, kt, vt = (reshape(t, (B, h, N, d)) for t in (q, k, v))
    s = _scores(qt, permute(kt, (0, 1, 3, 2)), scale, mask, "full pass")
    out = matmul(F.softmax_rows(s, base), vt)
    return reshape(out, (B, h, H, W, d))


def mhsa_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Plain scaled dot-product attention over all tokens, natural softmax."""
    return full_core(q, k, v, None, base="natural")


# -- module ------------------------------------------------------------------------

@dataclass
class AttentionConfig:
    embed_dim: int
    num_heads: int
    variant: str = "axial_gaussian"
    family: str = "gaussian"
    softmax_base: str = "two"
    lepe_kernel: int = 3
    grid: tuple = (16, 16)  # nominal (H, W), sets the initial sigma
    gammas: tuple | None = None

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown decay family {self.family!r}")
        if self.softmax_base not in ("two", "natural"):
            raise ConfigError(f"softmax base must be 'two' or 'natural', got {self.softmax_base!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class GaussianAttention(Module):
    """Projections, optional encoder fusion into K/V, decay attention and LePE.

    ``forward(x, enc)`` takes tokens ``x`` of shape (B, H, W, D) and an optional
    already re-encoded encoder feature ``enc`` of the same shape, which is added
    to the key and value projections only.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        D, h = cfg.embed_dim, cfg.num_heads
        self.q_proj = Linear(D, D, rng)
        self.k_proj = Linear(D, D, rng)
        self.v_proj = Linear(D, D, rng)
        self.lepe = None
        self.sigma = None
        self.gammas = None
        if cfg.variant != "mhsa":
            self.lepe = DepthwiseConv(D, cfg.lepe_kernel)
            if cfg.family == "gaussian":
                self.sigma = Parameter(np.full(h, max(cfg.grid) / 4.0))
            else:
                g = np.asarray(cfg.gammas if cfg.gammas is not None else default_gammas(h), dtype=np.float64)
                if g.shape != (h,):
                    raise ConfigError(f"need {h} gammas, got {g.shape}")
                for gv in g:
                    _check_param("exponential", float(gv))
                self.gammas = g
        self._mask_cache: dict = {}

    # masks ----------------------------------------------------------------------
    def clamp_(self) -> None:
        if self.sigma is not None:
            np.maximum(self.sigma.data, SIGMA_MIN, out=self.sigma.data)
            self._mask_cache.clear()

    def _decay(self, sq_dist: np.ndarray, key) -> Tensor:
        """Per-head log-domain mask (heads, n, n) as a graph tensor."""
        h = self.cfg.num_heads
        dtype = self.q_proj.weight.dtype
        if self.sigma is None:
            ck = ("exp", key, dtype.str)
            if ck not in self._mask_cache:
                dist = np.sqrt(sq_dist)
                self._mask_cache[ck] = Tensor(
                    (np.log(self.gammas)[:, None, None] * dist).astype(dtype)
                )
            return self._mask_cache[ck]
        track = grad_enabled() and self.sigma.requires_grad
        if not track:
            ck = ("gauss", key, self.sigma.data.tobytes(), dtype.str)
            if ck not in self._mask_cache:
                s = self.sigma.data.astype(np.float64)
                self._mask_cache[ck] = Tensor(
                    (-sq_dist[None] / (2.0 * s[:, None, None] ** 2)).astype(dtype)
                )
            return self._mask_cache[ck]
        coef = reshape(mul(self.sigma ** -2.0, -0.5), (h, 1, 1))
        return coef * Tensor(sq_dist.astype(dtype))

    def axis_masks(self, H: int, W: int) -> tuple[Tensor, Tensor]:
        return self._decay(_axis_sq_dist(H), ("axis", H)), self._decay(_axis_sq_dist(W), ("axis", W))

    def grid_mask(self, H: int, W: int) -> Tensor:
        return self._decay(_grid_sq_dist(H, W), ("grid", H, W))

    def decay_mask(self, H: int, W: int) -> DecayMask:
        if self.cfg.variant == "mhsa":
            raise ConfigError("the MHSA baseline has no decay mask")
        params = self.sigma.data.astype(np.float64) if self.sigma is not None else self.gammas
        fam = self.cfg.family
        mh = np.stack([build_axis_mask(H, fam, float(p)) for p in params])
        mw = np.stack([build_axis_mask(W, fam, float(p)) for p in params])
        return DecayMask(mh, mw, fam, np.array(params))

    # forward ----------------------------------------------------------------------
    def project(self, x: Tensor, enc: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        q = self.q_proj(x)
        k = self.k_proj(x)
        v = self.v_proj(x)
        if enc is not None:
            if enc.shape != k.shape:
                raise DimensionError(f"encoder feature {enc.shape} does not match tokens {k.shape}")
            k = k + enc
            v = v + enc
        return q, k, v

    def forward(self, x: Tensor, enc: Tensor | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(f"attention expects (B, H, W, {self.cfg.embed_dim}) tokens, got {x.shape}")
        _, H, W, _ = x.shape
        q, k, v = self.project(x, enc)
        heads = self.cfg.num_heads
        qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
        variant = self.cfg.variant
        if variant == "mhsa":
            return merge_heads(mhsa_core(qh, kh, vh))
        if variant == "axial_gaussian":
            mask_h, mask_w = self.axis_masks(H, W)
            out = axial_core(qh, kh, vh, mask_h, mask_w, self.cfg.softmax_base)
        else:
            out = full_core(qh, kh, vh, self.grid_mask(H, W), self.cfg.softmax_base)
        return merge_heads(out) + self.lepe(v)
