"""Differentiable neural-network ops built on :mod:`cfpformer.tensor`."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

LN2 = math.log(2.0)
_SOFTMAX_BASES = {"natural": 1.0, "two": LN2}


def softmax_rows(x: Tensor, base: str = "natural") -> Tensor:
    """Normalize the last axis.

    ``base="two"`` gives ``2**(x - max) / sum(2**(x - max))``, which equals the
    natural softmax of ``x * ln 2``.
    """
    try:
        c = _SOFTMAX_BASES[base]
    except KeyError:
        raise ConfigError(f"softmax base must be 'natural' or 'two', got {base!r}") from None
    y = x.data - x.data.max(axis=-1, keepdims=True)
    if c != 1.0:
        y *= c
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        gx = gy - y * gy.sum(axis=-1, keepdims=True)
        if c != 1.0:
            gx *= c
        return (gx,)

    return make_result(y, (x,), backward, f"softmax_{base}")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine params {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_result(out, (x, gain, bias), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = erf(x.data * (1.0 / math.sqrt(2.0)))
    cdf += 1.0
    cdf *= 0.5
    out = x.data * cdf

    def backward(g):
        d = x.data * x.data
        d *= -0.5
        np.exp(d, out=d)
        d *= x.data * (1.0 / math.sqrt(2.0 * math.pi))
        d += cdf
        d *= g
        return (d,)

    return make_result(out, (x,), backward, "gelu")


# -- convolutions -------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, k, k) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = weight.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d: kernel {weight.shape} does not match input {x.shape}")
    if k % 2 == 0 and stride != k:
        raise DimensionError(f"conv2d: even kernel {k} only supported as patchify (stride == kernel)")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    Ho, Wo = _out_extent(H, k, stride, padding), _out_extent(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, k, k) -> (B*Ho*Wo, C*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            gcols = np.ascontiguousarray(gcols.transpose(0, 3, 4, 5, 1, 2))  # (B, C, k, k, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def depthwise_conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel k x k convolution on a channels-last (B, H, W, C) grid, same padding."""
    B, H, W, C = x.shape
    Cw, k, _ = weight.shape
    if Cw != C or k % 2 == 0:
        raise DimensionError(f"depthwise conv: kernel {weight.shape} vs input {x.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    wt = weight.data.transpose(1, 2, 0)  # (k, k, C)
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + H, j:j + W, :] * wt[i, j]
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += g * wt[i, j]
            gx = np.ascontiguousarray(gxp[:, p:p + H, p:p + W, :])
        if weight.requires_grad:
            gwt = np.empty((k, k, C), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gwt[i, j] = (g * xp[:, i:i + H, j:j + W, :]).sum(axis=(0, 1, 2))
            gw = np.ascontiguousarray(gwt.transpose(2, 0, 1))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "depthwise_conv2d")


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Fractionally-strided convolution; kernel layout (C_in, C_out, k, k).

    Output extent is ``(n - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"transpose_conv2d: kernel {weight.shape} does not match input {x.shape}")
    B, C, H, W = x.shape
    _, O, k, _ = weight.shape
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"transpose_conv2d: padding {padding} too large for input {x.shape}")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = weight.data.reshape(C, O * k * k)
    cols = (x2 @ wmat).reshape(B, H, W, O, k, k)
    full = np.zeros((B, O, Hf, Wf), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, padding:padding + Ho, padding:padding + Wo])
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def backward(g):
        gfull = np.zeros((B, O, Hf, Wf), dtype=g.dtype)
        gfull[:, :, padding:padding + Ho, padding:padding + Wo] = g
        gcols = np.empty((B, H, W, O, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gcols[..., i, j] = gfull[:, :, i:i + stride * H:stride, j:j + stride * W:stride].transpose(0, 2, 3, 1)
        gcols2 = gcols.reshape(B * H * W, O * k * k)
        gx = (gcols2 @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        gw = (x2.T @ gcols2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "transpose_conv2d")


# -- resampling -----------------------------------------------------------------

@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres, edge clamp."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor; the operator is linear and separable."""
    B, C, H, W = x.shape
    ah = bilinear_matrix(H, out_h).astype(x.dtype)
    aw = bilinear_matrix(W, out_w).astype(x.dtype)
    out = ah @ (x.data @ aw.T)

    def backward(g):
        return ((ah.T @ g) @ aw,)

    return make_result(out, (x,), backward, "resize_bilinear")


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"bilinear_upsample_2x: expected NCHW input, got {x.shape}")
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


# -- regularization -------------------------------------------------------------

def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop-path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = ((rng.random(shape) < keep) / keep).astype(x.dtype)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "drop_path")
