"""Command-line entry point.

Exit codes: 0 success, 1 failed check (audit / benchmark mismatch), 2 usage,
3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import statistics
import sys
import time

import numpy as np

from .attention import AttentionConfig, GaussianAttention, build_axis_mask, count_scores
from .errors import ConfigError, FormatError, NumericError, UsageError
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
log = logging.getLogger("cfpformer")


# -- gen-data / audit-data ----------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import generate, split_counts

    splits = tuple(args.splits) if args.splits else split_counts(args.count)
    manifest = generate(args.out, args.count, args.size, args.seed, splits=splits)
    print(manifest)
    return EXIT_OK


def cmd_audit_data(args) -> int:
    from .data import check_scene_invariants, read_manifest
    from .serialize import load_tensor

    rows = read_manifest(args.manifest)
    bad = 0
    for split, _, mask_path in rows:
        problems = check_scene_invariants(load_tensor(mask_path))
        if problems:
            bad += 1
            print(f"{mask_path}: {'; '.join(problems)}")
    print(f"audited {len(rows)} masks, {bad} violating")
    return EXIT_CHECK if bad else EXIT_OK


# -- train / eval ---------------------------------------------------------------------

def _load_run_config(args):
    from .model import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return dataclasses.replace(cfg, **changes) if changes else cfg


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_run_config(args)
    res = train(cfg, progress=lambda r: print(
        f"epoch {r[0]:3d}  loss {r[1]:.4f}  val dice {r[2]:.4f}  val hd {r[3]:.3f}", flush=True))
    print(f"best epoch {res.best_epoch}: val mean dice {res.best_val_dice:.6f}")
    print(os.path.join(res.out_dir, "best.cfpc"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    manifest = args.manifest
    if manifest is None and not args.oracle:
        from .model import load_model

        _, cfg = load_model(args.checkpoint)
        manifest = cfg.manifest
    if manifest is None:
        raise UsageError("--manifest is required with --oracle")
    report = evaluate_checkpoint(args.checkpoint, manifest, args.split, args.batch_size, oracle=args.oracle)
    text = report.to_csv()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text)
    print(f"{'class':>6} {'dice':>10} {'hd':>10}")
    for line in text.strip().splitlines()[1:]:
        c, d, h = line.split(",")
        print(f"{c:>6} {d:>10} {h:>10}")
    return EXIT_OK


# -- benchmark ----------------------------------------------------------------------------

VARIANT_ALIASES = {"axial": "axial_gaussian", "full": "full_gaussian", "mhsa": "mhsa"}


def closed_form_entries(variant: str, H: int, W: int) -> int:
    if variant == "axial_gaussian":
        return H * W * (H + W)
    return (H * W) ** 2


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for tok in text.split(","):
        try:
            h, w = tok.lower().split("x")
            out.append((int(h), int(w)))
        except ValueError:
            raise UsageError(f"bad size {tok!r}; expected HxW") from None
    return out


def bench_attention(sizes, variants, repeats: int = 3, dim: int = 8, seed: int = 0) -> list[dict]:
    """One image, one head: count score entries and time the forward pass."""
    rows = []
    for H, W in sizes:
        for variant in variants:
            att = GaussianAttention(AttentionConfig(dim, 1, variant, grid=(H, W)), np.random.default_rng(seed))
            x = Tensor(np.random.default_rng(seed + 1).standard_normal((1, H, W, dim)).astype(np.float32))
            times = []
            entries = None
            with no_grad():
                for _ in range(max(repeats, 1)):
                    with count_scores() as counter:
                        t0 = time.perf_counter()
                        att(x)
                        times.append(time.perf_counter() - t0)
                    entries = counter.entries
            expected = closed_form_entries(variant, H, W)
            rows.append({"variant": variant, "H": H, "W": W, "score_entries": entries,
                         "closed_form": expected, "match": entries == expected,
                         "median_seconds": statistics.median(times)})
    return rows


def cmd_bench_attention(args) -> int:
    sizes = _parse_sizes(args.sizes)
    try:
        variants = [VARIANT_ALIASES[v] for v in args.variants.split(",")]
    except KeyError as e:
        raise UsageError(f"unknown variant {e}; choose from {sorted(VARIANT_ALIASES)}") from None
    rows = bench_attention(sizes, variants, args.repeats, seed=args.seed or 0)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "H", "W", "score_entries", "closed_form", "median_seconds"])
        for r in rows:
            w.writerow([r["variant"], r["H"], r["W"], r["score_entries"], r["closed_form"],
                        f"{r['median_seconds']:.6f}"])
    for r in rows:
        print(f"{r['variant']:>15} {r['H']:>4}x{r['W']:<4} entries {r['score_entries']:>10} "
              f"(closed form {r['closed_form']}) {r['median_seconds'] * 1e3:8.3f} ms")
    if not all(r["match"] for r in rows):
        print("score-entry count does not match the closed form", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- ablations ------------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    from .train import COMPONENT_VARIANTS, UPSAMPLING_VARIANTS, run_sweep, write_sweep_csv

    cfg = _load_run_config(args)
    variants = UPSAMPLING_VARIANTS if args.axis == "upsampling" else COMPONENT_VARIANTS
    rows = run_sweep(cfg, variants, cfg.out_dir, args.split)
    path = os.path.join(cfg.out_dir, "ablation.csv" if args.axis == "components" else "upsampling.csv")
    write_sweep_csv(path, rows)
    for r in rows:
        print(f"{r['variant']:>24} {r['status']:>6} dice {r['mean_dice']:.4f} params {r['params']}")
    print(path)
    return EXIT_OK


# -- mask export ------------------------------------------------------------------------------

def export_masks(out_dir, height: int, width: int, family: str, param: float) -> dict:
    from .data import to_uint8
    from .serialize import save_tensor, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    masks = {"mask_h": build_axis_mask(height, family, param), "mask_w": build_axis_mask(width, family, param)}
    written = {}
    for name, m in masks.items():
        lin = np.exp(m)
        for suffix, arr in (("log", m), ("linear", lin)):
            p = os.path.join(out_dir, f"{name}_{suffix}.cfpt")
            save_tensor(p, arr)
            written[f"{name}_{suffix}"] = p
        p = os.path.join(out_dir, f"{name}.pgm")
        write_pgm(p, to_uint8(lin))
        written[f"{name}_pgm"] = p
    # decay around the grid centre: outer product of the two axis profiles
    centre = np.outer(np.exp(masks["mask_h"][height // 2]), np.exp(masks["mask_w"][width // 2]))
    p = os.path.join(out_dir, "decay_centre.pgm")
    write_pgm(p, to_uint8(centre))
    written["decay_centre_pgm"] = p
    return written


def cmd_export_masks(args) -> int:
    written = export_masks(args.out, args.height, args.width or args.height, args.family, args.param)
    for k in sorted(written):
        print(written[k])
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfpformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic segmentation corpus")
    g.add_argument("--count", type=int, default=260)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--splits", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("audit-data", help="check scene invariants of every mask in a manifest")
    a.add_argument("--manifest", required=True)
    a.set_defaults(func=cmd_audit_data)

    for name, func, helptext in (("train", cmd_train, "train a model from a run config"),
                                 ("ablate", cmd_ablate, "shared-seed ablation sweep")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", help="RunConfig JSON (defaults used when omitted)")
        t.add_argument("--seed", type=int)
        t.add_argument("--out", help="output directory (overrides config out_dir)")
        t.add_argument("--epochs", type=int)
        if name == "ablate":
            t.add_argument("--axis", choices=("components", "upsampling"), default="components")
            t.add_argument("--split", default="test", choices=("val", "test"))
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--checkpoint", help="CFPC checkpoint")
    e.add_argument("--manifest", help="defaults to the manifest recorded in the checkpoint")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--batch-size", type=int)
    e.add_argument("--oracle", action="store_true", help="score ground-truth labels as predictions")
    e.add_argument("--out", help="write the CSV report here")
    e.add_argument("--seed", type=int, help="accepted for interface uniformity; evaluation is deterministic")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attention", help="count attention score entries and time variants")
    b.add_argument("--sizes", default="8x8,8x16,16x16,32x32")
    b.add_argument("--variants", default="axial,full")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(func=cmd_bench_attention)

    m = sub.add_parser("export-masks", help="write decay masks as CFPT tensors and PGM heat maps")
    m.add_argument("--height", type=int, default=16)
    m.add_argument("--width", type=int)
    m.add_argument("--family", choices=("gaussian", "exponential"), default="gaussian")
    m.add_argument("--param", type=float, default=4.0, help="sigma (gaussian) or gamma (exponential)")
    m.add_argument("--out", default="masks")
    m.set_defaults(func=cmd_export_masks)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.checkpoint and not args.oracle:
        parser.error("eval needs --checkpoint or --oracle")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, KeyError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
