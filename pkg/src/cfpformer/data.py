"""Synthetic cardiac-like segmentation corpus, augmentation, and resizing.

Each scene has three foreground structures: an LV-like disc (class 3)
wrapped by a MYO-like annulus (class 2), and an RV-like ellipse (class 1)
placed beside the annulus without overlapping it.  Background is class 0.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError, UsageError
from .serialize import load_tensor, read_pgm, save_tensor, write_pgm

BACKGROUND, RV, MYO, LV = 0, 1, 2, 3
NUM_CLASSES = 4
SPLITS = ("train", "val", "test")


@dataclass
class SceneRanges:
    """Sampling ranges, as fractions of the image side unless noted."""

    lv_axis: tuple = (0.08, 0.14)
    myo_thickness: tuple = (0.035, 0.06)
    rv_major: tuple = (0.10, 0.16)
    rv_minor: tuple = (0.06, 0.10)
    gap: tuple = (0.5, 2.0)  # pixels between annulus and RV bounding circles
    intensity: tuple = (0.15, 0.65, 0.40, 0.90)  # per-class mean, by class id
    noise: float = 0.06


@dataclass
class SegSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class ids
    num_classes: int = NUM_CLASSES
    meta: dict = field(default_factory=dict)


@dataclass
class SceneSpec:
    size: int
    center: tuple
    lv_axes: tuple
    thickness: float
    lv_angle: float
    rv_center: tuple
    rv_axes: tuple
    rv_angle: float


def _uniform(rng, lo_hi, scale=1.0):
    return float(rng.uniform(lo_hi[0] * scale, lo_hi[1] * scale))


def sample_scene(rng: np.random.Generator, size: int, ranges: SceneRanges) -> SceneSpec:
    for _ in range(1000):
        a, b = _uniform(rng, ranges.lv_axis, size), _uniform(rng, ranges.lv_axis, size)
        t = _uniform(rng, ranges.myo_thickness, size)
        lv_angle = float(rng.uniform(0.0, math.pi))
        ra, rb = _uniform(rng, ranges.rv_major, size), _uniform(rng, ranges.rv_minor, size)
        rv_angle = float(rng.uniform(0.0, math.pi))
        phi = float(rng.uniform(0.0, 2.0 * math.pi))
        gap = _uniform(rng, ranges.gap)
        r_out = max(a, b) + t
        r_rv = max(ra, rb)
        dist = r_out + r_rv + gap
        off = (dist * math.sin(phi), dist * math.cos(phi))
        lo = [max(1.0 + r_out, 1.0 + r_rv - o) for o in off]
        hi = [min(size - 2.0 - r_out, size - 2.0 - r_rv - o) for o in off]
        if lo[0] > hi[0] or lo[1] > hi[1]:
            continue
        cy, cx = (float(rng.uniform(l, h)) for l, h in zip(lo, hi))
        return SceneSpec(size, (cy, cx), (a, b), t, lv_angle, (cy + off[0], cx + off[1]), (ra, rb), rv_angle)
    raise UsageError(f"scene ranges do not fit a {size}x{size} image")


def _ellipse(size: int, center, axes, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def render_mask(spec: SceneSpec) -> np.ndarray:
    n = spec.size
    mask = np.zeros((n, n), dtype=np.uint8)
    mask[_ellipse(n, spec.rv_center, spec.rv_axes, spec.rv_angle)] = RV
    outer = (spec.lv_axes[0] + spec.thickness, spec.lv_axes[1] + spec.thickness)
    mask[_ellipse(n, spec.center, outer, spec.lv_angle)] = MYO
    mask[_ellipse(n, spec.center, spec.lv_axes, spec.lv_angle)] = LV
    return mask


def render_image(mask: np.ndarray, rng: np.random.Generator, ranges: SceneRanges) -> np.ndarray:
    means = np.asarray(ranges.intensity, dtype=np.float64)
    img = means[mask] + rng.normal(0.0, ranges.noise, size=mask.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_sample(seed: int, index: int, size: int, ranges: SceneRanges | None = None) -> SegSample:
    ranges = ranges or SceneRanges()
    rng = sample_rng(seed, index)
    spec = sample_scene(rng, size, ranges)
    mask = render_mask(spec)
    image = to_uint8(render_image(mask, rng, ranges)).astype(np.float32) / 255.0
    return SegSample(image, mask, NUM_CLASSES, {"scene": asdict(spec)})


def expected_class_areas(size: int, ranges: SceneRanges | None = None) -> dict:
    """Analytic expected pixel area per foreground class (ellipse areas)."""
    r = ranges or SceneRanges()

    def m(lo_hi):
        return 0.5 * (lo_hi[0] + lo_hi[1]) * size

    def m2(lo_hi):
        lo, hi = lo_hi[0] * size, lo_hi[1] * size
        return (lo * lo + lo * hi + hi * hi) / 3.0

    ea = m(r.lv_axis)
    et = m(r.myo_thickness)
    return {
        RV: math.pi * m(r.rv_major) * m(r.rv_minor),
        MYO: math.pi * (2.0 * et * ea + m2(r.myo_thickness)),
        LV: math.pi * ea * ea,
    }


def check_scene_invariants(mask: np.ndarray) -> list[str]:
    """Empty list when containment / presence / border invariants hold."""
    problems = []
    for c in (RV, MYO, LV):
        if not (mask == c).any():
            problems.append(f"class {c} missing")
    if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
        problems.append("structure touches the image border")
    lv = mask == LV
    padded = np.pad(mask, 1)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + mask.shape[0], 1 + dx:1 + dx + mask.shape[1]]
        if np.any(lv & ~np.isin(nb, (LV, MYO))):
            problems.append("LV disc not enclosed by the MYO annulus")
            break
    rv = mask == RV
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + mask.shape[0], 1 + dx:1 + dx + mask.shape[1]]
        if np.any(rv & (nb == LV)):
            problems.append("RV touches LV")
            break
    return problems


# -- augmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    rotation: int  # quarter turns counter-clockwise
    hflip: bool
    vflip: bool

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, self.rotation)
        if self.hflip:
            out = out[:, ::-1]
        if self.vflip:
            out = out[::-1, :]
        return np.ascontiguousarray(out)


def sample_transform(rng: np.random.Generator) -> Transform:
    return Transform(int(rng.integers(0, 4)), bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def augment(sample: SegSample, seed) -> SegSample:
    """Random quarter-turn rotation plus independent horizontal / vertical flips."""
    if sample.image.shape[0] != sample.image.shape[1]:
        raise UsageError(f"augment needs square images, got {sample.image.shape}")
    t = sample_transform(np.random.default_rng(seed))
    return SegSample(t.apply(sample.image), t.apply(sample.mask), sample.num_classes,
                     {**sample.meta, "transform": t})


# -- resizing -------------------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.where(x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1, 0.0)
    return np.where((x > 1) & (x < 2), a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, out)


@lru_cache(maxsize=32)
def cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom resampling matrix, half-pixel centres, clamped edges."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        for tap in range(base - 1, base + 3):
            w = float(cubic_kernel(np.array(src - tap)))
            m[i, min(max(tap, 0), n_in - 1)] += w
    m.setflags(write=False)
    return m


def resize_cubic(image: np.ndarray, target) -> np.ndarray:
    th, tw = (target, target) if np.isscalar(target) else target
    if th < 1 or tw < 1:
        raise UsageError(f"target size must be >= 1, got {target}")
    h, w = image.shape
    out = cubic_matrix(h, th) @ image.astype(np.float64) @ cubic_matrix(w, tw).T
    return out.astype(image.dtype) if image.dtype.kind == "f" else out


def resize_nearest(mask: np.ndarray, target) -> np.ndarray:
    th, tw = (target, target) if np.isscalar(target) else target
    h, w = mask.shape
    ys = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    xs = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return mask[np.ix_(ys, xs)]


# -- corpus on disk ------------------------------------------------------------------------

def split_counts(count: int, fractions=(200, 20, 40)) -> tuple:
    """Split ``count`` samples in the default 200/20/40 proportions."""
    total = sum(fractions)
    n_val = round(count * fractions[1] / total)
    n_test = round(count * fractions[2] / total)
    return count - n_val - n_test, n_val, n_test


def generate(out_dir, count: int, size: int = 64, seed: int = 7, ranges: SceneRanges | None = None,
             splits: tuple | None = None) -> str:
    """Write images (PGM), masks (CFPT u8) and ``manifest.csv``; returns the manifest path."""
    if count < 1:
        raise UsageError("count must be >= 1")
    ranges = ranges or SceneRanges()
    splits = splits or split_counts(count)
    if sum(splits) != count:
        raise UsageError(f"split sizes {splits} do not add up to {count}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    names = [s for s, n in zip(SPLITS, splits) for _ in range(n)]
    rows = []
    for i, split in enumerate(names):
        s = make_sample(seed, i, size, ranges)
        img_rel = f"images/{i:05d}.pgm"
        mask_rel = f"masks/{i:05d}.cfpt"
        write_pgm(os.path.join(out_dir, img_rel), to_uint8(s.image))
        save_tensor(os.path.join(out_dir, mask_rel), s.mask)
        rows.append((split, img_rel, mask_rel))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["split", "image_path", "mask_path"])
        w.writerows(rows)
    return manifest


def read_manifest(path) -> list[tuple[str, str, str]]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["split", "image_path", "mask_path"]:
            raise FormatError(f"{path}: bad manifest header {header}")
        rows = []
        for r in reader:
            if len(r) != 3 or r[0] not in SPLITS:
                raise FormatError(f"{path}: bad manifest row {r}")
            rows.append((r[0], os.path.join(base, r[1]), os.path.join(base, r[2])))
    return rows


def load_split(manifest, split: str, size: int | None = None, limit: int | None = None) -> list[SegSample]:
    """Load one split; images are resized with the cubic kernel and masks nearest-neighbour."""
    samples = []
    for s, img_path, mask_path in read_manifest(manifest):
        if s != split:
            continue
        image = read_pgm(img_path).astype(np.float32) / 255.0
        mask = load_tensor(mask_path)
        if mask.dtype != np.uint8 or mask.shape != image.shape:
            raise FormatError(f"{mask_path}: mask {mask.dtype} {mask.shape} does not match image {image.shape}")
        if size is not None and image.shape != (size, size):
            image = np.clip(resize_cubic(image, size), 0.0, 1.0).astype(np.float32)
            mask = resize_nearest(mask, size)
        samples.append(SegSample(image, mask, NUM_CLASSES, {"path": img_path}))
        if limit is not None and len(samples) >= limit:
            break
    return samples
