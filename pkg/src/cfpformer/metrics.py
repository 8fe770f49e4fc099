"""Dice similarity coefficient and Hausdorff distance over label masks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import UsageError

UNDEFINED = float("nan")


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for one class; 1.0 when both sets are empty."""
    _check(pred, gt)
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    """max over src pixels of the distance to the nearest dst pixel."""
    # squared distances to the nearest dst pixel; EDT of the complement of dst
    sq = distance_transform_edt(~dst, return_distances=True, return_indices=False) ** 2
    worst = float(np.round(sq[src].max()))
    return math.sqrt(worst)


def hausdorff(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Symmetric Hausdorff distance (pixels) between the class's pixel sets.

    Returns NaN (undefined) when either set is empty.
    """
    _check(pred, gt)
    p = pred == class_id
    g = gt == class_id
    if not p.any() or not g.any():
        return UNDEFINED
    return max(_directed(p, g), _directed(g, p))


@dataclass
class Report:
    """Per-class means over samples; ``hd`` ignores undefined samples."""

    classes: list
    dice: dict
    hd: dict
    per_sample: list = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[c] for c in self.classes]))

    @property
    def mean_hd(self) -> float:
        vals = [self.hd[c] for c in self.classes if not math.isnan(self.hd[c])]
        return float(np.mean(vals)) if vals else UNDEFINED

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "hd"])
        for c in self.classes:
            w.writerow([c, _fmt(self.dice[c]), _fmt(self.hd[c])])
        w.writerow(["mean", _fmt(self.mean_dice), _fmt(self.mean_hd)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def evaluate_masks(preds, gts, num_classes: int, classes=None) -> Report:
    """Aggregate dice / HD over paired masks; classes default to the foreground ids."""
    classes = list(range(1, num_classes)) if classes is None else list(classes)
    per_sample = []
    for p, g in zip(preds, gts):
        per_sample.append({c: (dice(p, g, c), hausdorff(p, g, c)) for c in classes})
    if not per_sample:
        raise UsageError("cannot evaluate an empty dataset")
    dsc = {c: float(np.mean([s[c][0] for s in per_sample])) for c in classes}
    hd = {}
    for c in classes:
        vals = [s[c][1] for s in per_sample if not math.isnan(s[c][1])]
        hd[c] = float(np.mean(vals)) if vals else UNDEFINED
    return Report(classes, dsc, hd, per_sample)
