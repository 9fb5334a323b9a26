"""Command-line entry points: train, evaluate, infer, reconstruct-demo, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import FIELD_TYPES, load_config, save_config

log = logging.getLogger("packdepth")


class CommandError(Exception):
    """A user-facing failure; reported without a traceback, exit code 1."""


# -- train -------------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser):
    group = p.add_argument_group("config overrides (one flag per TrainConfig field)")
    for name, kind in FIELD_TYPES.items():
        if name in ("seed", "version"):
            continue
        flag = "--" + name.replace("_", "-")
        group.add_argument(flag, dest=f"ov_{name}", default=None, metavar=kind.__name__.upper(),
                           help=f"override '{name}'")
    p.add_argument("--resume", action="store_true",
                   help="continue from <output_dir>/checkpoint.pt (error if absent)")


def cmd_train(args) -> int:
    from .trainer import CheckpointError, fit

    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("ov_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
    except (FileNotFoundError, KeyError, ValueError, TypeError, yaml.YAMLError) as e:
        raise CommandError(f"invalid config: {e}") from None
    if cfg.dataset != "synthetic" and not Path(cfg.dataset).is_dir():
        raise CommandError(f"dataset not found: {cfg.dataset}")
    out = Path(cfg.output_dir)
    if args.resume and not (out / "checkpoint.pt").exists():
        raise CommandError(f"--resume: no checkpoint in {out}")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    torch.manual_seed(cfg.seed)
    try:
        state = fit(cfg, resume=args.resume)
    except CheckpointError as e:
        raise CommandError(str(e)) from None
    print(f"trained {state.step} steps ({state.epoch} epochs); checkpoint: {out / 'checkpoint.pt'}")
    return 0


# -- evaluate ----------------------------------------------------------------------------

def _eval_config(args):
    from .metrics import EvalConfig, range_bins

    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CommandError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        unknown = set(raw) - {"min_depth", "max_depth", "median_scaling", "range_bins"}
        if unknown:
            raise CommandError(f"unknown eval config keys: {sorted(unknown)}")
    for key in ("min_depth", "max_depth", "median_scaling"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.bin_width:
        raw["range_bins"] = range_bins(raw.get("max_depth", 80.0), args.bin_width)
    try:
        return EvalConfig(**raw)
    except (TypeError, ValueError) as e:
        raise CommandError(f"invalid eval config: {e}") from None


def _gt_frames(dataset_root: Path):
    frames = []
    for seq_dir in sorted(p for p in dataset_root.iterdir() if p.is_dir()):
        depth_dir = seq_dir / "depth"
        if depth_dir.is_dir():
            frames += [(seq_dir.name, int(p.stem), p) for p in sorted(depth_dir.glob("*.png"))]
    return frames


def cmd_evaluate(args) -> int:
    from .data import read_depth_png, read_image, resize_image
    from .metrics import (aggregate, binned_metrics, depth_metrics, format_table, write_jsonl)
    from .trainer import CheckpointError, load_depth_net, predict_depth

    cfg = _eval_config(args)
    root = Path(args.dataset)
    if not root.is_dir():
        raise CommandError(f"dataset not found: {root}")
    frames = _gt_frames(root)
    if not frames:
        raise CommandError(f"no ground-truth depth rasters under {root}/*/depth/")
    if (args.checkpoint is None) == (args.predictions is None):
        raise CommandError("give exactly one of --checkpoint or --predictions")
    net = train_cfg = None
    if args.checkpoint:
        try:
            net, train_cfg = load_depth_net(args.checkpoint)
        except CheckpointError as e:
            raise CommandError(str(e)) from None

    reports, bin_lists = [], []
    for seq, idx, gt_path in frames:
        gt = read_depth_png(gt_path)[0].numpy()
        name = f"{seq}/{idx:06d}"
        if net is not None:
            image = read_image(root / seq / "images" / f"{idx:06d}.png")
            image = resize_image(image, train_cfg.width, train_cfg.height)
            pred = predict_depth(net, image[None], train_cfg.min_depth, train_cfg.max_depth,
                                 out_size=gt.shape)[0, 0].numpy()
        else:
            pred_path = Path(args.predictions) / seq / f"{idx:06d}.png"
            if not pred_path.exists():
                raise CommandError(f"missing prediction {pred_path}")
            pred = read_depth_png(pred_path)[0].numpy()
            if pred.shape != gt.shape:
                raise CommandError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
            if (pred <= 0).any():
                raise CommandError(f"{name}: prediction contains non-positive depth")
        try:
            reports.append((name, depth_metrics(pred, gt, cfg)))
            if cfg.range_bins:
                bin_lists.append(binned_metrics(pred, gt, cfg))
        except ValueError as e:
            raise CommandError(f"{name}: {e}") from None

    total = aggregate([r for _, r in reports])
    bins = None
    if cfg.range_bins:
        bins = [(rng, aggregate([bl[i][1] for bl in bin_lists])) for i, rng in enumerate(cfg.range_bins)]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "report.jsonl", reports, total, bins)
    label = "median-scaled" if cfg.median_scaling else "metric"
    rows = [(f"all ({label})", total)] + [(f"{lo:g}-{hi:g} m", r) for (lo, hi), r in bins or []]
    table = format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    if bins:
        with open(out / "bins.csv", "w") as f:
            f.write("lo,hi,n_pixels," + ",".join(("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")) + "\n")
            for (lo, hi), r in bins:
                f.write(f"{lo},{hi},{r.n_pixels}," + ",".join(repr(v) for v in r.as_tuple()) + "\n")
    print(table)
    return 0


# -- infer -------------------------------------------------------------------------------

def cmd_infer(args) -> int:
    from .data import DatasetError, read_image, resize_image, write_depth_png
    from .trainer import CheckpointError, load_depth_net, predict_depth

    try:
        net, train_cfg = load_depth_net(args.checkpoint)
    except CheckpointError as e:
        raise CommandError(str(e)) from None
    out = Path(args.output)
    images = []
    for path in args.images:
        try:
            images.append((Path(path), read_image(path)))
        except (DatasetError, FileNotFoundError) as e:
            raise CommandError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    for path, image in images:
        h, w = image.shape[-2:]
        x = resize_image(image, train_cfg.width, train_cfg.height)
        depth = predict_depth(net, x[None], train_cfg.min_depth, train_cfg.max_depth, out_size=(h, w))
        write_depth_png(out / f"{path.stem}.png", depth[0, 0])
        print(f"{path} -> {out / (path.stem + '.png')}")
    return 0


# -- reconstruct-demo --------------------------------------------------------------------

def cmd_reconstruct_demo(args) -> int:
    from .data import DatasetError, read_image, write_image
    from .demo import reconstruct_demo, textured_test_image

    if args.image:
        try:
            image = read_image(args.image)
        except (DatasetError, FileNotFoundError) as e:
            raise CommandError(str(e)) from None
    else:
        image = textured_test_image(args.size, seed=args.seed or 0)
    seed = args.seed if args.seed is not None else 0
    res = reconstruct_demo(image, steps=args.steps, lr=args.lr, seed=seed)
    report = {"pack_unpack_l1": res.pack_loss, "pool_bilinear_l1": res.pool_loss,
              "ratio": res.ratio, "steps": args.steps, "seed": seed}
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        write_image(out / "input.png", image)
        write_image(out / "pack_unpack.png", res.pack_output)
        write_image(out / "pool_bilinear.png", res.pool_output)
        with open(out / "curves.jsonl", "w") as f:
            for i, (a, b) in enumerate(zip(res.pack_curve, res.pool_curve)):
                f.write(json.dumps({"index": i, "pack_unpack": a, "pool_bilinear": b}) + "\n")
    print(f"pack/unpack L1 {res.pack_loss:.4f}  pool/bilinear L1 {res.pool_loss:.4f}  "
          f"ratio {res.ratio:.1f}x")
    return 0


# -- plot --------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import read_jsonl

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if not args.log and not args.report:
        raise CommandError("nothing to plot: give --log and/or --report")
    if args.log:
        path = Path(args.log)
        if not path.exists():
            raise CommandError(f"log not found: {path}")
        recs = [r for r in read_jsonl(path) if "step" in r]
        if not recs:
            raise CommandError(f"{path} has no step records")
        fig, ax = plt.subplots(figsize=(6, 4))
        steps = [r["step"] for r in recs]
        for key in ("loss", "photometric", "velocity"):
            ax.plot(steps, [r[key] for r in recs], label=key)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curve.png", dpi=100)
        plt.close(fig)
    if args.report:
        path = Path(args.report)
        if not path.exists():
            raise CommandError(f"report not found: {path}")
        bins = [r for r in read_jsonl(path) if r.get("kind") == "bin"]
        if not bins:
            raise CommandError(f"{path} has no per-bin records (evaluate with --bin-width)")
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [f"{b['lo']:g}-{b['hi']:g}" for b in bins]
        ax.bar(labels, [b[args.metric] if b["n_pixels"] else 0.0 for b in bins])
        ax.set_xlabel("ground-truth depth range (m)")
        ax.set_ylabel(args.metric)
        fig.tight_layout()
        fig.savefig(out / f"bins_{args.metric}.png", dpi=100)
        plt.close(fig)
    print(f"plots written to {out}")
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="packdepth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML/JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="random seed")

    p = sub.add_parser("train", help="train depth and pose networks")
    common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="depth metrics against ground-truth rasters")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset root with <seq>/depth/*.png")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None, help="directory of <seq>/NNNNNN.png depth rasters")
    p.add_argument("--output", required=True)
    p.add_argument("--min-depth", dest="min_depth", type=float, default=None)
    p.add_argument("--max-depth", dest="max_depth", type=float, default=None)
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--median-scaling", dest="median_scaling", action="store_true", default=None)
    scale.add_argument("--no-median-scaling", dest="median_scaling", action="store_false")
    p.add_argument("--bin-width", dest="bin_width", type=float, default=None,
                   help="also report metrics per ground-truth range of this width (m)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="write 16-bit depth rasters for images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("reconstruct-demo", help="pack/unpack vs pool/bilinear single-image autoencoders")
    common(p)
    p.add_argument("--image", default=None, help="RGB image (default: built-in 128x128 pattern)")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_reconstruct_demo)

    p = sub.add_parser("plot", help="loss curves and per-range bar charts")
    common(p)
    p.add_argument("--log", default=None, help="training log.jsonl")
    p.add_argument("--report", default=None, help="evaluate report.jsonl with bins")
    p.add_argument("--metric", default="abs_rel")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
