"""Command-line entry point: ``gsdyn {synth,train,eval,render}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig
from .data import DatasetError, load_dataset, read_cameras, synth
from .engine import EngineError
from .train import CHECKPOINT_NAME, TrainingAborted, evaluate, load_model, render_sequence, train


class CLIError(Exception):
    pass


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.out:
        return Path(args.out) / CHECKPOINT_NAME
    raise CLIError("--checkpoint is required")


def cmd_synth(args) -> None:
    if not args.out:
        raise CLIError("--out is required")
    ds = synth(_config(args), args.out, force=args.force)
    print(f"wrote {len(ds.frames)} frames ({len(ds.split('test'))} held out) to {args.out}")


def cmd_train(args) -> None:
    if not args.data or not args.out:
        raise CLIError("--data and --out are required")
    out = Path(args.out)
    if (out / CHECKPOINT_NAME).exists() and not args.force:
        raise CLIError(f"{out} already holds a run (use --force)")
    cfg = _config(args)
    ds = load_dataset(args.data)
    model = train(cfg, ds, out)
    res = evaluate(model, ds, out=out / "eval.tsv")
    print(f"done: N={len(model.scene)}  test PSNR {res['psnr']:.2f} dB  SSIM {res['ssim']:.4f}")


def cmd_eval(args) -> None:
    if not args.data:
        raise CLIError("--data is required")
    model = load_model(_checkpoint(args))
    ds = load_dataset(args.data)
    out = Path(args.out) / "eval.tsv" if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    res = evaluate(model, ds, split=args.split, out=out)
    print("path\tcamera\ttime\tpsnr\tssim")
    for r in res["rows"]:
        print(f"{r[0]}\t{r[1]}\t{r[2]:.6f}\t{r[3]:.4f}\t{r[4]:.4f}")
    print(f"mean\t\t\t{res['psnr']:.4f}\t{res['ssim']:.4f}")


def cmd_render(args) -> None:
    if not args.out:
        raise CLIError("--out is required")
    model = load_model(_checkpoint(args))
    if args.cameras:
        cams = read_cameras(args.cameras)
    elif args.data:
        cams = load_dataset(args.data).cameras
    else:
        raise CLIError("--cameras or --data is required")
    if args.camera is not None:
        if args.camera not in cams:
            raise CLIError(f"unknown camera {args.camera}")
        cams = {args.camera: cams[args.camera]}
    times = [float(t) for t in args.times.split(",") if t.strip()] if args.times else []
    for t in times:
        if not 0.0 <= t <= 1.0:
            raise CLIError(f"time {t} outside [0, 1]")
    written = render_sequence(model, cams, times, args.out)
    print(f"wrote {len(written)} frames to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsdyn", description="Dynamic Gaussian splatting on the CPU.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset").set_defaults(fn=cmd_synth)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(fn=cmd_train)
    ev = sub.add_parser("eval", parents=[common], help="PSNR/SSIM per frame")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.set_defaults(fn=cmd_eval)
    rd = sub.add_parser("render", parents=[common], help="render frames at given times")
    rd.add_argument("--times", default="", help="comma-separated normalized times")
    rd.add_argument("--camera", type=int, help="render only this camera id")
    rd.add_argument("--cameras", help="cameras.tsv to render from (default: the dataset's)")
    rd.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (CLIError, ConfigError, DatasetError, CheckpointError, TrainingAborted, EngineError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error\t{args.command}\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
