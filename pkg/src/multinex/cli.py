"""``multinex`` command line: enhance, train, init, stacks, analyze, eval, params, synth.

Exit codes: 0 success, 1 domain error (bad checkpoint, dataset layout,
divergence, invalid values), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis, guidance
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .image_io import ImageFormatError, load_image, save_image
from .metrics import evaluate, max_scales
from .nn import VariantConfig, count_flops, count_params, enhance, init_params
from .train import IMAGE_SUFFIXES, DatasetLayoutError, PairedDataset, TrainConfig, TrainingDiverged, train

log = logging.getLogger("multinex")

VARIANT_KEYS = ("hidden_C", "fb_depth_T", "bottleneck_d", "nano_simplified", "formulation")


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("MULTINEX_THREADS")
    if raw is None:
        return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MULTINEX_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MULTINEX_THREADS must be a positive integer, got {raw!r}")
    return n


def _pmap(fn, items):
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _require_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _images_in(path):
    """(basename, path) pairs for a file or every image in a directory, sorted by name."""
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_SUFFIXES))
        return [(n, os.path.join(path, n)) for n in names]
    _require_file(path, "input image")
    return [(os.path.basename(path), path)]


# ------------------------------------------------------------------ enhance

def _delta_png(delta, path):
    lo, hi = float(np.min(delta)), float(np.max(delta))
    scale = hi - lo
    vis = np.full_like(delta, 0.5) if scale == 0 else (delta - lo) / scale
    save_image(vis, path)
    return lo, scale


def cmd_enhance(args):
    _require_file(args.weights, "weights file")
    variant = VariantConfig.from_name(args.variant)
    params = load_checkpoint(args.weights, expect=variant)
    files = _images_in(args.input)
    many = os.path.isdir(args.input)
    if many and not files:
        raise UsageError(f"no images found in {args.input}")

    def run(item):
        name, path = item
        out_path = os.path.join(args.output, name) if many else args.output
        res = enhance(load_image(path), params, variant)
        save_image(res.image, out_path)
        lines = [f"{path} -> {out_path}"]
        if args.dump_deltas:
            stem = os.path.splitext(name)[0]
            for tag, delta in (("delta_l", res.delta_l), ("delta_r", res.delta_r)):
                if delta is None:
                    continue
                p = os.path.join(args.dump_deltas, f"{stem}_{tag}.png")
                lo, scale = _delta_png(delta, p)
                lines.append(f"  {tag}: {p} shows (v - {lo!r}) / {scale!r}")
        return lines

    for lines in _pmap(run, files):
        print("\n".join(lines))
    return 0


# -------------------------------------------------------------------- train

def _load_config_file(path):
    if path is None:
        return {}
    _require_file(path, "config file")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object of flat keys")
    unknown = sorted(set(cfg) - TrainConfig.keys() - set(VARIANT_KEYS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return cfg


def build_configs(args):
    """(VariantConfig, TrainConfig) from the config file with CLI flags taking precedence."""
    cfg = _load_config_file(args.config)
    overrides = {
        "iterations": args.iters, "batch": args.batch, "patch": args.patch,
        "lr_start": args.lr, "seed": args.seed,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    variant = VariantConfig.from_name(args.variant, **{k: cfg[k] for k in VARIANT_KEYS if k in cfg})
    train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in TrainConfig.keys()})
    return variant, train_cfg


def cmd_train(args):
    variant, cfg = build_configs(args)
    ds = PairedDataset.from_root(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump({"variant": variant.to_dict(), "train": cfg.to_dict()}, fh, indent=2, sort_keys=True)
    if cfg.iterations == 0:
        path = os.path.join(args.out, "checkpoints", "iter_0000000.mnx")
        save_checkpoint(init_params(variant, seed=cfg.seed), path)
        print(f"wrote initial checkpoint {path}")
        return 0
    result = train(ds, variant, cfg, out_dir=args.out)
    last = result.trace[-1]
    print(f"trained {variant.name} for {cfg.iterations} iterations on {len(ds)} pairs; final loss {last[2]:.6f}")
    print(f"checkpoint {os.path.join(args.out, 'final.mnx')}, trace {os.path.join(args.out, 'trace.csv')}")
    return 0


def cmd_init(args):
    variant = VariantConfig.from_name(args.variant)
    params = init_params(variant, seed=args.seed)
    save_checkpoint(params, args.out)
    print(f"wrote {variant.name} initial weights ({params.count} parameters) to {args.out}")
    return 0


# ------------------------------------------------------------------- stacks

def cmd_stacks(args):
    img = load_image(args.input)
    makers = {
        "luminance": [guidance.luminance_stack],
        "reflectance": [guidance.reflectance_stack],
        "extended": [guidance.extended_candidates],
        "all": [guidance.luminance_stack, guidance.reflectance_stack, guidance.extended_candidates],
    }[args.kind]
    for make in makers:
        stack = make(img)
        for path in guidance.dump_stack(stack, os.path.join(args.out, stack.kind)):
            print(path)
    return 0


# ------------------------------------------------------------------ analyze

POOLS = {"luminance": guidance.LUMINANCE_POOL, "chroma": guidance.CHROMA_POOL}
STACKS = {
    "luminance": guidance.luminance_stack,
    "reflectance": guidance.reflectance_stack,
    "extended": guidance.extended_candidates,
}


def cmd_analyze_dia(args):
    img = load_image(args.input)
    report = analysis.descriptor_importance(img, POOLS[args.pool])
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "importance.csv")
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    peak = max(max(float(r.map_e.max()), float(r.map_g.max())) for r in report.rows)
    scale = peak if peak > 0 else 1.0
    for r in report.rows:
        save_image(r.map_e / scale, os.path.join(args.out, f"{r.name}_deltaE.png"))
        save_image(r.map_g / scale, os.path.join(args.out, f"{r.name}_deltaG.png"))
    sys.stdout.write(report.to_csv())
    print(f"maps scaled by 1/{scale!r}; wrote {csv_path}")
    return 0


def _lra_target(choice, img, stack):
    if choice == "self":
        return stack.tensor[:, :, 0]
    if choice.startswith("self:"):
        return stack[choice[5:]]
    if choice == "input":
        return img
    return load_image(choice)


def cmd_analyze_lra(args):
    img = load_image(args.input)
    stack = STACKS[args.stack](img)
    try:
        target = _lra_target(args.target, img, stack)
    except ValueError as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise UsageError(f"unknown target descriptor in {args.target!r}") from None
    D = stack.K if args.d.upper() == "K" else int(args.d)
    res = analysis.lra(stack, target, D=D, ridge=args.ridge)
    os.makedirs(args.out, exist_ok=True)
    save_image(np.clip(res.reconstruction, 0.0, 1.0), os.path.join(args.out, "reconstruction.png"))
    rep = res.report() | {"stack": stack.kind, "descriptors": list(stack.descriptor_names), "target": args.target}
    with open(os.path.join(args.out, "lra.json"), "w") as fh:
        json.dump(rep, fh, indent=2)
    print(f"LRA {stack.kind} D={D} ridge={args.ridge!r}: mean MSE {rep['mean_mse']!r}")
    return 0


def cmd_analyze_corr(args):
    img = load_image(args.input)
    maps = guidance.all_maps(img)
    if args.maps:
        missing = [n for n in args.maps if n not in maps]
        if missing:
            raise UsageError(f"unknown descriptors {missing}; available: {sorted(maps)}")
        maps = {n: maps[n] for n in args.maps}
    names, R = analysis.correlation_matrix(maps)
    text = analysis.correlation_csv(names, R)
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------- eval

def cmd_eval(args):
    preds = _images_in(args.pred)
    if os.path.isdir(args.pred):
        if not os.path.isdir(args.gt):
            raise UsageError("--gt must be a directory when --pred is a directory")
        pairs = [(n, p, os.path.join(args.gt, n)) for n, p in preds]
    else:
        pairs = [(preds[0][0], preds[0][1], args.gt)]
    if not pairs:
        raise UsageError(f"no images found in {args.pred}")
    for _, _, g in pairs:
        _require_file(g, "ground-truth image")

    def run(item):
        name, p, g = item
        pred, gt = load_image(p), load_image(g)
        scales = min(5, max_scales(*gt.shape[:2]))
        if scales < 1:
            raise ValueError(f"{name}: image too small for SSIM (needs at least 11x11)")
        plain = evaluate(pred, gt, scales=scales)
        row = [plain.psnr, plain.ssim, plain.msssim]
        if args.gt_mean:
            rescaled = evaluate(pred, gt, gt_mean=True, scales=scales)
            row += [rescaled.psnr, rescaled.ssim, rescaled.q]
        return name, row

    rows = _pmap(run, pairs)
    header = ["file", "psnr", "ssim", "msssim"]
    if args.gt_mean:
        header += ["psnr_gtmean", "ssim_gtmean", "q"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for name, row in rows:
        w.writerow([name] + [repr(float(v)) for v in row])
    means = np.mean([row for _, row in rows], axis=0)
    w.writerow(["mean"] + [repr(float(m)) for m in means])
    text = buf.getvalue()
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------- params

def cmd_params(args):
    variant = VariantConfig.from_name(args.variant)
    table, total = count_params(variant)
    width = max(len(r.layer) for r in table)
    print(f"{'layer':<{width}}  params  shapes")
    for r in table:
        shapes = ", ".join("x".join(map(str, s)) for s in r.shapes)
        print(f"{r.layer:<{width}}  {r.params:>6}  {shapes}")
    print(f"{'total':<{width}}  {total:>6}")
    h, w = args.resolution
    rep = count_flops(variant, h, w)
    print(f"MACs at {h}x{w}: {rep.macs} ({rep.macs / 1e9:.4f} G); FLOPs: {rep.flops} ({rep.gflops:.4f} G)")
    return 0


# -------------------------------------------------------------------- synth

def cmd_synth(args):
    from .synthetic import make_pairs, write_dataset

    pairs = make_pairs(args.n, args.size, seed=args.seed)
    write_dataset(args.out, pairs)
    print(f"wrote {len(pairs)} synthetic pairs of {args.size}x{args.size} to {args.out}")
    return 0


# ------------------------------------------------------------------- parser

def _resolution(text):
    try:
        parts = [int(v) for v in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must be N or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"resolution must be N or HxW, got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multinex", description="Lightweight low-light image enhancement.")
    ap.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)
    variants = ["lightweight", "nano"]

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--variant", choices=variants, default="lightweight")
    p.add_argument("--dump-deltas", metavar="DIR")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="train on a low/ + high/ dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=variants, default="lightweight")
    p.add_argument("--config", help="JSON file with flat TrainConfig/VariantConfig keys")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("init", help="write freshly initialised weights")
    p.add_argument("--variant", choices=variants, default="lightweight")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("stacks", help="write guidance descriptors as PNGs")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["luminance", "reflectance", "extended", "all"], default="all")
    p.set_defaults(func=cmd_stacks)

    p = sub.add_parser("analyze", help="descriptor analysis")
    asub = p.add_subparsers(dest="analysis", required=True)
    q = asub.add_parser("dia", help="leave-one-out descriptor importance")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--pool", choices=sorted(POOLS), default="luminance")
    q.set_defaults(func=cmd_analyze_dia)
    q = asub.add_parser("lra", help="linear reconstruction from a guidance stack")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--stack", choices=sorted(STACKS), default="luminance")
    q.add_argument("--target", default="input",
                   help="'input', 'self' (first stack channel), 'self:NAME', or an image path")
    q.add_argument("--d", default=str(analysis.DEFAULT_D), help="number of components, or K for all")
    q.add_argument("--ridge", type=float, default=analysis.DEFAULT_RIDGE)
    q.set_defaults(func=cmd_analyze_lra)
    q = asub.add_parser("corr", help="Pearson correlation between descriptor maps")
    q.add_argument("--input", required=True)
    q.add_argument("--out")
    q.add_argument("--maps", nargs="+")
    q.set_defaults(func=cmd_analyze_corr)

    p = sub.add_parser("eval", help="PSNR / SSIM / MS-SSIM against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.add_argument("--gt-mean", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="per-layer parameter table and FLOPs")
    p.add_argument("--variant", choices=variants, default="lightweight")
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic paired low-light dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        worker_count()
        if args.command == "analyze" and args.analysis == "lra" and args.d.upper() != "K" and not args.d.isdigit():
            raise UsageError(f"--d must be a positive integer or K, got {args.d!r}")
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, PermissionError, ImageFormatError) as exc:
        print(f"multinex: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetLayoutError, TrainingDiverged, ValueError, KeyError) as exc:
        print(f"multinex: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"multinex: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
