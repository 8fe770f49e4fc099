"""Independent reference implementations used by the test-suite.

Everything here is deliberately naive: explicit loops, float64, no shared code
with the package beyond the Tensor container.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from cfpformer.tensor import Tensor, no_grad, verification_mode


# -- finite differences -------------------------------------------------------------

def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``.

    The floor only matters for gradients that vanish structurally (e.g. key
    biases under softmax shift invariance), where 32-bit rounding noise would
    otherwise be divided by ~0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(fn, arrays, bits: int = 64, seed: int = 0, h: float = 1e-6, wrt=None) -> float:
    """Max relative error between the engine's gradient and central differences.

    ``fn`` maps Tensors to a Tensor; the scalar loss is a seeded weighted sum of
    its output (a plain sum would make e.g. softmax gradients identically zero).
    The finite-difference side always runs in float64; ``bits`` selects the
    precision of the analytic side.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    with verification_mode(), no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def loss64(arrs):
        with verification_mode(), no_grad():
            return float((fn(*[Tensor(a) for a in arrs]).data * weights).sum())

    dtype = np.float64 if bits == 64 else np.float32
    ts = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    if bits == 64:
        with verification_mode():
            y = fn(*ts)
            (y * Tensor(weights)).sum().backward()
    else:
        y = fn(*ts)
        assert y.dtype == np.float32, f"32-bit path produced {y.dtype}"
        (y * Tensor(weights.astype(np.float32))).sum().backward()

    worst = 0.0
    for i in wrt:
        num = np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (loss64(plus) - loss64(minus)) / (2 * h)
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_err(ana, num))
    return worst


def model_grad_check(make_model, loss_fn, bits: int = 64, coords: int = 3, seed: int = 0,
                     h: float = 1e-6, jitter: float = 0.05) -> dict:
    """Per-parameter relative error of model gradients against central differences.

    ``make_model()`` must build identical models on every call.  Parameters are
    jittered (seeded) first so zero-initialised branches are exercised.  A
    few coordinates per parameter are probed; the error is norm-wise over them,
    with a denominator floor of 1% of the largest probed gradient norm.
    """
    rng = np.random.default_rng(seed)
    ref = make_model()
    noise = {n: jitter * rng.standard_normal(p.shape) for n, p in ref.named_parameters()}

    def prepared(dtype):
        m = make_model()
        m.astype(dtype)
        for n, p in m.named_parameters():
            p.data = (p.data.astype(np.float64) + noise[n]).astype(dtype)
        m.eval()
        return m

    m64 = prepared(np.float64)
    if bits == 64:
        with verification_mode():
            loss_fn(m64).backward()
        analytic = {n: p.grad.astype(np.float64) for n, p in m64.named_parameters()}
    else:
        m32 = prepared(np.float32)
        loss_fn(m32).backward()
        analytic = {n: p.grad.astype(np.float64) for n, p in m32.named_parameters()}

    probes = {}
    for n, p in m64.named_parameters():
        picks = rng.choice(p.size, size=min(coords, p.size), replace=False)
        num, ana = [], []
        for flat in picks:
            old = p.data.flat[flat]
            with verification_mode(), no_grad():
                p.data.flat[flat] = old + h
                lp = loss_fn(m64).item()
                p.data.flat[flat] = old - h
                lm = loss_fn(m64).item()
            p.data.flat[flat] = old
            num.append((lp - lm) / (2 * h))
            ana.append(analytic[n].flat[flat])
        probes[n] = (np.array(ana), np.array(num))
    # parameters whose gradient vanishes structurally are judged against the
    # model's gradient scale rather than against their own ~0 norm
    floor = 1e-2 * max(np.linalg.norm(num) for _, num in probes.values())
    return {n: rel_err(ana, num, floor=max(floor, 1e-12)) for n, (ana, num) in probes.items()}


# -- attention -----------------------------------------------------------------------

def _softmax(row, base="natural"):
    row = np.asarray(row, dtype=np.float64)
    if base == "two":
        row = row * math.log(2.0)
    e = np.exp(row - row.max())
    return e / e.sum()


def axial_attention_loops(q, k, v, mask_h, mask_w, base="two"):
    """Materialise every W x W row matrix and H x H column matrix explicitly.

    q, k, v: (B, heads, H, W, d); mask_h: (heads, H, H); mask_w: (heads, W, W).
    """
    B, nh, H, W, d = q.shape
    scale = 1.0 / math.sqrt(d)
    vw = np.zeros_like(v, dtype=np.float64)
    for b, h, r in itertools.product(range(B), range(nh), range(H)):
        A = np.zeros((W, W))
        for i in range(W):
            scores = [q[b, h, r, i] @ k[b, h, r, j] * scale + mask_w[h, i, j] for j in range(W)]
            A[i] = _softmax(scores, base)
        vw[b, h, r] = A @ v[b, h, r]
    out = np.zeros_like(vw)
    for b, h, c in itertools.product(range(B), range(nh), range(W)):
        A = np.zeros((H, H))
        for i in range(H):
            scores = [q[b, h, i, c] @ k[b, h, j, c] * scale + mask_h[h, i, j] for j in range(H)]
            A[i] = _softmax(scores, base)
        out[b, h, :, c] = A @ vw[b, h, :, c]
    return out


def full_attention_loops(q, k, v, mask, base="natural"):
    """Token-to-token attention over the flattened grid; ``mask`` (heads, N, N) or None."""
    B, nh, H, W, d = q.shape
    N = H * W
    qt, kt, vt = (t.reshape(B, nh, N, d).astype(np.float64) for t in (q, k, v))
    out = np.zeros_like(vt)
    for b, h in itertools.product(range(B), range(nh)):
        for i in range(N):
            scores = qt[b, h, i] @ kt[b, h].T / math.sqrt(d)
            if mask is not None:
                scores = scores + mask[h, i]
            out[b, h, i] = _softmax(scores, base) @ vt[b, h]
    return out.reshape(B, nh, H, W, d)


def depthwise_loops(x, weight, bias):
    """(B, H, W, C) channels-last depthwise correlation with zero 'same' padding."""
    B, H, W, C = x.shape
    k = weight.shape[-1]
    r = k // 2
    out = np.zeros((B, H, W, C))
    for b, i, j, c in itertools.product(range(B), range(H), range(W), range(C)):
        acc = bias[c]
        for di, dj in itertools.product(range(k), range(k)):
            y, xx = i + di - r, j + dj - r
            if 0 <= y < H and 0 <= xx < W:
                acc += weight[c, di, dj] * x[b, y, xx, c]
        out[b, i, j, c] = acc
    return out


# -- metrics -------------------------------------------------------------------------

def dice_loops(pred, gt, c):
    p = g = inter = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        p += a == c
        g += b == c
        inter += (a == c) and (b == c)
    return 1.0 if p + g == 0 else 2.0 * inter / (p + g)


def hausdorff_loops(pred, gt, c):
    P = [(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1]) if pred[i, j] == c]
    G = [(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if gt[i, j] == c]
    if not P or not G:
        return float("nan")

    def directed(A, B):
        worst = 0.0
        for a in A:
            best = min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in B)
            worst = max(worst, best)
        return worst

    return max(directed(P, G), directed(G, P))


# -- parameter count --------------------------------------------------------------------

def tiny_parameter_count(widths=(16, 32, 64, 128), enc=(16, 32, 64, 128), blocks=(1, 1, 3, 1),
                         heads=(2, 4, 8, 16), mlp=3, bb_blocks=(1, 1, 2, 1), classes=4, lepe=3,
                         upsampling="bilinear", fre=True, attention="axial_gaussian") -> int:
    """Closed-form parameter count from the layer dimensions."""

    def cna(i, o):  # 3x3 conv + bias, layer-norm gain + bias
        return 9 * i * o + o + 2 * o

    bb = cna(1, enc[0]) + sum(cna(enc[s - 1], enc[s]) for s in (1, 2, 3))
    bb += sum(bb_blocks[s] * cna(enc[s], enc[s]) for s in range(4))

    def block(D, h, E):
        n = 2 * D + 3 * (D * D + D) + (D * D + D) + 2 * D
        n += D * mlp * D + mlp * D + mlp * D * D + D
        if attention != "mhsa":
            n += lepe * lepe * D + D + h
        if fre:
            n += E * D + D
        return n

    dec = enc[3] * widths[3] + widths[3]
    for s in range(4):
        dec += blocks[s] * block(widths[s], heads[s], enc[s])
    for s in (3, 2, 1):
        if upsampling == "bilinear":
            dec += widths[s] * widths[s - 1] + widths[s - 1]
        else:
            dec += 4 * widths[s] * widths[s - 1] + widths[s - 1]
    dec += 2 * widths[0] + widths[0] * classes + classes
    return bb + dec
