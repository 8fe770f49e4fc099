"""Training, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .data import SegSample, augment, load_split
from .errors import ConfigError, NumericError
from .metrics import Report, evaluate_masks
from .model import CfpSegmenter, RunConfig, load_model, save_model
from .optim import Adam
from .tensor import Tensor, debug_mode, exp, no_grad, permute

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_dice_mean", "val_hd_mean"]


# -- losses ----------------------------------------------------------------------

def dice_ce_loss(logits: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Pixel-mean cross-entropy plus class-mean soft-Dice loss."""
    B, C, H, W = logits.shape
    logp = F.log_softmax(permute(logits, (0, 2, 3, 1)))
    onehot = np.eye(C, dtype=logits.dtype)[target]
    ce = (logp * onehot).sum() * (-1.0 / (B * H * W))
    prob = exp(logp)
    inter = (prob * onehot).sum(axis=(0, 1, 2))
    denom = prob.sum(axis=(0, 1, 2)) + onehot.sum(axis=(0, 1, 2))
    dsc = (inter * 2.0 + eps) / (denom + eps)
    return ce + (1.0 - dsc).mean()


LOSSES = {"dice_ce": dice_ce_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; available: {sorted(LOSSES)}") from None


# -- inference --------------------------------------------------------------------

def _batch(samples: list[SegSample]) -> tuple[Tensor, np.ndarray]:
    x = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.int64)
    return Tensor(x), y


def predict(model: CfpSegmenter, samples: list[SegSample], batch_size: int = 8) -> list[np.ndarray]:
    model.eval()
    preds = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = _batch(samples[i:i + batch_size])
            logits = model(x).data
            preds.extend(np.argmax(logits, axis=1).astype(np.uint8))
    return preds


def evaluate_model(model: CfpSegmenter, samples: list[SegSample], batch_size: int = 8) -> Report:
    preds = predict(model, samples, batch_size)
    return evaluate_masks(preds, [s.mask for s in samples], samples[0].num_classes)


def evaluate_checkpoint(checkpoint, manifest, split: str = "test", batch_size: int | None = None,
                        oracle: bool = False) -> Report:
    """Evaluate a CFPC checkpoint on a manifest split; ``oracle`` scores the labels themselves."""
    if oracle:
        samples = load_split(manifest, split)
        return evaluate_masks([s.mask for s in samples], [s.mask for s in samples], samples[0].num_classes)
    model, cfg = load_model(checkpoint)
    samples = load_split(manifest, split, cfg.model.image_size)
    return evaluate_model(model, samples, batch_size or cfg.eval_batch_size)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: str
    rows: list
    best_epoch: int
    best_val_dice: float
    num_parameters: int


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _diagnose_nan(model, x, y, loss_fn, rng_state) -> str:
    """Re-run the batch with the non-finite guard on; return the first failing op."""
    if model.decoder.rng is not None and rng_state is not None:
        model.decoder.rng.bit_generator.state = rng_state
    try:
        with debug_mode(), no_grad():
            loss_fn(model(x), y)
    except NumericError as e:
        return e.op or str(e)
    return "loss (all forward ops finite)"


def train(cfg: RunConfig, out_dir: str | None = None, progress=None) -> TrainResult:
    """Train with Adam and write config.json, metrics.csv, timing.csv, curves.svg and checkpoints."""
    out_dir = out_dir or cfg.out_dir
    if not os.path.exists(cfg.manifest):
        raise FileNotFoundError(f"manifest not found: {cfg.manifest}")
    cfg = dataclasses.replace(cfg, out_dir=out_dir)
    os.makedirs(out_dir, exist_ok=True)
    loss_fn = get_loss(cfg.loss)
    size = cfg.model.image_size
    train_set = load_split(cfg.manifest, "train", size, limit=cfg.max_train_samples)
    val_set = load_split(cfg.manifest, "val", size)
    if not train_set or not val_set:
        raise FileNotFoundError(f"{cfg.manifest}: train and val splits must be non-empty")

    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(cfg.to_json())

    model = cfg.build_model()
    o = cfg.optimizer
    opt = Adam(model.parameters(), lr=o.lr, weight_decay=o.weight_decay, betas=(o.beta1, o.beta2), eps=o.eps)
    rows, timing = [], []
    best = (-1.0, 0)
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        model.set_rng(np.random.default_rng([cfg.seed, epoch, 1]))
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment(train_set[i], [cfg.seed, epoch, int(i)]) if cfg.augment else train_set[i] for i in idx]
            x, y = _batch(batch)
            rng_state = model.decoder.rng.bit_generator.state
            try:
                loss = loss_fn(model(x), y)
                value = loss.item()
            except NumericError:  # a module-level guard fired; find the op that started it
                value = math.nan
            if not math.isfinite(value):
                op = _diagnose_nan(model, x, y, loss_fn, rng_state)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}; "
                                   f"first non-finite op: {op}", op=op)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.clamp_()
            total += value * len(idx)
            seen += len(idx)
        report = evaluate_model(model, val_set, cfg.eval_batch_size)
        row = [epoch, total / seen, report.mean_dice, report.mean_hd]
        rows.append(row)
        timing.append((epoch, time.perf_counter() - t0))
        save_model(os.path.join(out_dir, "last.cfpc"), model, cfg)
        if report.mean_dice > best[0]:
            best = (report.mean_dice, epoch)
            save_model(os.path.join(out_dir, "best.cfpc"), model, cfg)
        _write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        _write_timing(os.path.join(out_dir, "timing.csv"), timing)
        log.info("epoch %d loss %.4f val dice %.4f hd %.3f (%.1fs)", epoch, row[1], row[2], row[3], timing[-1][1])
        if progress is not None:
            progress(row)
    with open(os.path.join(out_dir, "curves.svg"), "w") as f:
        f.write(curves_svg(rows))
    return TrainResult(out_dir, rows, best[1], best[0], model.num_parameters())


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for epoch, loss, dsc, hd in rows:
            w.writerow([epoch, _fmt(loss), _fmt(dsc), _fmt(hd)])


def _write_timing(path, timing) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "wall_seconds"])
        for epoch, secs in timing:
            w.writerow([epoch, f"{secs:.3f}"])


def curves_svg(rows, width: int = 640, height: int = 260) -> str:
    """Two side-by-side panels: training loss and validation mean Dice per epoch."""
    epochs = [r[0] for r in rows]
    panels = [("train loss", [r[1] for r in rows]), ("val mean DSC", [r[2] for r in rows])]
    pw, ph, pad = width // 2, height, 36
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (title, ys) in enumerate(panels):
        x0 = k * pw
        finite = [v for v in ys if math.isfinite(v)] or [0.0]
        lo, hi = min(finite), max(finite)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        e_lo, e_hi = min(epochs), max(epochs)
        span = max(e_hi - e_lo, 1)

        def sx(e):
            return x0 + pad + (e - e_lo) / span * (pw - 2 * pad)

        def sy(v):
            return ph - pad - (v - lo) / (hi - lo) * (ph - 2 * pad)

        pts = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in zip(epochs, ys) if math.isfinite(v))
        parts += [
            f'<rect x="{x0 + pad}" y="{pad}" width="{pw - 2 * pad}" height="{ph - 2 * pad}" fill="none" stroke="#999"/>',
            f'<text x="{x0 + pw / 2:.1f}" y="{pad - 10}" text-anchor="middle">{title}</text>',
            f'<text x="{x0 + pad - 4}" y="{pad + 4}" text-anchor="end">{hi:.3f}</text>',
            f'<text x="{x0 + pad - 4}" y="{ph - pad}" text-anchor="end">{lo:.3f}</text>',
            f'<text x="{x0 + pw / 2:.1f}" y="{ph - 8}" text-anchor="middle">epoch {e_lo}-{e_hi}</text>',
            f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts}"/>',
        ]
    parts.append("</svg>\n")
    return "\n".join(parts)


# -- ablations ---------------------------------------------------------------------------

COMPONENT_VARIANTS = (
    ("base", {}),
    ("ga_to_mhsa", {"attention_variant": "mhsa"}),
    ("wo_pyramid_connection", {"use_pyramid_connection": False}),
    ("log2softmax_to_softmax", {"softmax_base": "natural"}),
    ("wo_fre", {"use_fre": False}),
)
UPSAMPLING_VARIANTS = (
    ("bilinear", {"upsampling": "bilinear"}),
    ("transpose_conv", {"upsampling": "transpose_conv"}),
)
ABLATION_HEADER = ["variant", "status", "mean_dice", "params", "detail"]


def run_sweep(cfg: RunConfig, variants, out_dir: str | None = None, split: str = "test") -> list[dict]:
    """Train every variant with the shared seed; construction failures are recorded, not raised."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name, changes in variants:
        row = {"variant": name, "status": "ok", "mean_dice": float("nan"), "params": 0, "detail": ""}
        try:
            model_cfg = cfg.model.replace(**changes)
            vcfg = dataclasses.replace(cfg, model=model_cfg, out_dir=os.path.join(out_dir, name))
            row["params"] = vcfg.build_model().num_parameters()
        except ConfigError as e:
            row.update(status="error", detail=str(e))
            rows.append(row)
            continue
        try:
            res = train(vcfg)
            rep = evaluate_checkpoint(os.path.join(res.out_dir, "best.cfpc"), cfg.manifest, split)
            row["mean_dice"] = rep.mean_dice
        except NumericError as e:
            row.update(status="error", detail=str(e))
        rows.append(row)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["variant"], r["status"], _fmt(r["mean_dice"]), r["params"], r["detail"]])
