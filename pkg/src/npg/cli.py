"""Command-line entry point: ``npg <subcommand> ...``.

Every subcommand starts from a preset, applies an optional ``--config`` INI
file and then the flags, and writes the resolved configuration next to its
outputs as ``config.ini``.  Usage errors and missing inputs exit with 2,
any other validation failure with 1.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .coarse_losses import chamfer_pixels
from .coarse_model import load_checkpoint, point_trajectories, save_checkpoint
from .config import ConfigError, read_config, stage1_config, stage2_config, synth_kwargs, write_config
from .dataset import DatasetError, load_dataset, read_image, write_png
from .geometry import project
from .metrics import psnr, ssim
from .ply import write_ply
from .synthetic import generate_synthetic
from .training import (fit_point_colors, load_stage2, render_frame, save_stage2, stage1_optimize,
                       stage2_optimize, write_history)

log = logging.getLogger("npg")


class UsageError(Exception):
    """Bad or missing input; reported with the usage line and exit status 2."""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file overriding the preset")
    p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npg", description="Neural parametric Gaussians on a CPU.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate an oracle scene")
    p.add_argument("--kind")
    p.add_argument("--frames", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--k-star", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--static", action="store_true", default=None)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("fit-coarse", help="stage 1: fit the low-rank point model")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--color-iters", type=int, default=20)
    _common(p)

    p = sub.add_parser("fit-gaussians", help="stage 2: fit volume-anchored Gaussians")
    p.add_argument("data", type=Path)
    p.add_argument("--coarse", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--finetune", action="store_true", default=None)
    p.add_argument("--static", action="store_true", default=None)
    _common(p)

    p = sub.add_parser("render", help="render a split's cameras with a stage-2 model")
    p.add_argument("model", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("export-ply", help="write the Gaussians of one frame as PLY")
    p.add_argument("model", type=Path)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("eval", help="PSNR / SSIM of rendered images against a split")
    p.add_argument("renders", type=Path, help="directory of PNGs named like the split's frames")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--masked", action="store_true", help="restrict PSNR to the mask")
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("trajectories", help="write per-point polylines of a coarse model")
    p.add_argument("model", type=Path, help="coarse (.ckpt) or stage-2 checkpoint")
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[(section.strip(), name.strip())] = value.strip()
    flags = {
        "synth": {("synth", "kind"): "kind", ("synth", "n_frames"): "frames",
                  ("synth", "resolution"): "resolution", ("synth", "k_star"): "k_star",
                  ("synth", "seed"): "seed", ("synth", "static"): "static"},
        "fit-coarse": {("stage1", "K"): "k", ("stage1", "M"): "m", ("stage1", "iterations"): "iters",
                       ("stage1", "seed"): "seed"},
        "fit-gaussians": {("stage2", "iterations"): "iters", ("stage2", "seed"): "seed",
                          ("stage2", "finetune"): "finetune", ("stage2", "static"): "static"},
    }.get(args.command, {})
    for target, attr in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[target] = value
    return out


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")


def _frame_index(time: float, n_frames: int) -> int:
    return int(np.clip(round(time * (n_frames - 1)), 0, n_frames - 1))


def cmd_synth(args, cp) -> int:
    kw = synth_kwargs(cp)
    args.out.mkdir(parents=True, exist_ok=True)
    scene = generate_synthetic(**kw, out=args.out)
    write_config(cp, args.out / "config.ini")
    print(f"wrote {scene.kind} scene with {len(scene.dataset)} frames to {args.out}")
    return 0


def cmd_fit_coarse(args, cp) -> int:
    _require(args.data, "dataset")
    cfg = stage1_config(cp)
    ds = load_dataset(args.data, require_flow=cfg.weights.flow > 0)
    args.out.mkdir(parents=True, exist_ok=True)
    write_config(cp, args.out / "config.ini")
    res = stage1_optimize(ds, cfg)
    if args.color_iters > 0:
        fit_point_colors(res.model, ds, iterations=args.color_iters)
    save_checkpoint(res.model, args.out / "coarse.ckpt")
    write_history(args.out / "stage1_history.csv", res.history)
    P = res.model.all_points()
    rows = [{"frame": t, "chamfer_px": chamfer_pixels(project(ds.cameras[t], P[t])[0], ds.masks[t])}
            for t in range(len(ds))]
    write_history(args.out / "stage1_metrics.csv", rows)
    print(f"mean mask Chamfer {np.mean([r['chamfer_px'] for r in rows]):.3f} px; "
          f"checkpoint {args.out / 'coarse.ckpt'}")
    return 0


def cmd_fit_gaussians(args, cp) -> int:
    _require(args.data, "dataset")
    _require(args.coarse, "coarse checkpoint")
    cfg = stage2_config(cp)
    ds = load_dataset(args.data)
    coarse = load_checkpoint(args.coarse)
    if coarse.n_frames != len(ds):
        raise ValueError(f"checkpoint has {coarse.n_frames} frames, dataset {len(ds)}")
    args.out.mkdir(parents=True, exist_ok=True)
    write_config(cp, args.out / "config.ini")
    res = stage2_optimize(coarse, ds, cfg)
    save_stage2(res, args.out / "gaussians.ckpt")
    write_history(args.out / "stage2_history.csv", res.history)
    print(f"{len(res.soup)} Gaussians; checkpoint {args.out / 'gaussians.ckpt'}")
    return 0


def cmd_render(args, cp) -> int:
    _require(args.model, "model")
    _require(args.data, "dataset")
    res = load_stage2(args.model)
    ds = load_dataset(args.data, args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    n = len(res.coarse_points)
    for i, (cam, time, name) in enumerate(zip(ds.cameras, ds.times, ds.names)):
        rgb, _ = render_frame(res, _frame_index(time, n), cam)
        write_png(args.out / (Path(name).name + ".png"), rgb)
    print(f"rendered {len(ds)} views to {args.out}")
    return 0


def cmd_export_ply(args, cp) -> int:
    _require(args.model, "model")
    res = load_stage2(args.model)
    if not 0 <= args.frame < len(res.coarse_points):
        raise UsageError(f"--frame must lie in [0, {len(res.coarse_points) - 1}]")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(args.out, res.soup, res.coarse_points[args.frame], res.volumes, res.frames[args.frame])
    print(f"wrote {len(res.soup)} Gaussians to {args.out}")
    return 0


def cmd_eval(args, cp) -> int:
    _require(args.renders, "render directory")
    _require(args.data, "dataset")
    ds = load_dataset(args.data, args.split)
    rows = []
    for t, name in enumerate(ds.names):
        path = args.renders / (Path(name).name + ".png")
        _require(path, "rendered image")
        pred = read_image(path)
        mask = ds.masks[t] if args.masked else None
        rows.append({"frame": t, "psnr": psnr(pred, ds.images[t], mask), "ssim": ssim(pred, ds.images[t])})
    args.out.mkdir(parents=True, exist_ok=True)
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    rows.append({"frame": "mean", "psnr": mean_psnr, "ssim": mean_ssim})
    with open(args.out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["frame", "psnr", "ssim"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    shown = "inf" if math.isinf(mean_psnr) else f"{mean_psnr:.3f}"
    print(f"PSNR {shown} dB  SSIM {mean_ssim:.4f}")
    return 0


def cmd_trajectories(args, cp) -> int:
    _require(args.model, "model")
    try:
        model = load_checkpoint(args.model)
    except (ValueError, KeyError):
        model = load_stage2(args.model).coarse
    traj = point_trajectories(model)
    args.out.mkdir(parents=True, exist_ok=True)
    np.save(args.out / "trajectories.npy", traj)
    with open(args.out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "frame", "x", "y", "z"])
        for i, poly in enumerate(traj):
            for t, (x, y, z) in enumerate(poly):
                w.writerow([i, t, repr(float(x)), repr(float(y)), repr(float(z))])
    print(f"wrote {traj.shape[0]} polylines of {traj.shape[1]} frames to {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "fit-coarse": cmd_fit_coarse, "fit-gaussians": cmd_fit_gaussians,
            "render": cmd_render, "export-ply": cmd_export_ply, "eval": cmd_eval,
            "trajectories": cmd_trajectories}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = read_config(args.config, args.preset, _overrides(args))
        return COMMANDS[args.command](args, cp)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"npg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, ValueError, FloatingPointError) as exc:
        print(f"npg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
