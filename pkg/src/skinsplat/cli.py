"""Command-line interface.

Subcommands: train, render, animate, eval, export, mask, timing. Every
command takes `--set dotted.key=value` overrides onto the run configuration
and honors `--seed`. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .body import PoseParams, load_body_model
from .cloud import save_ply
from .config import RunConfig
from .container import FormatError, ValidationError
from .data import generate_synthetic_scene, load_dataset, parse_cameras_file, parse_poses_file
from .deform import filter_background
from .images import load_rgb, save_depth16, save_mask, save_rgb
from .losses import metric_psnr, ssim_value
from .pipeline import AvatarModel, StageTimer, render_avatar
from .raster import render_mask
from .train import (
    TrainingDiverged,
    init_trainer,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


def main(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args)
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args, config)
    except (FormatError, ValidationError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skinsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key config override")
        sp.add_argument("--seed", type=int, help="override config.seed")

    sp = sub.add_parser("train", help="fit an avatar on a scene directory")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--resume", type=Path, help="checkpoint to resume from")
    sp.add_argument("--allow-config-change", action="store_true")
    sp.add_argument("--progress-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render one pose from a checkpoint")
    common(sp)
    _inference_args(sp)
    sp.add_argument("--frame", type=int, default=0, help="pose index in the pose file")
    sp.add_argument("--keep-background", action="store_true")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--save-depth", type=Path)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("animate", help="render a pose sequence")
    common(sp)
    _inference_args(sp)
    sp.add_argument("--keep-background", action="store_true")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.set_defaults(func=cmd_animate)

    sp = sub.add_parser("eval", help="PSNR/SSIM table against dataset frames")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--split", choices=["train", "heldout", "all"], default="heldout")
    sp.add_argument("--filter-background", action="store_true",
                    help="render the avatar only (default keeps the learned background)")
    sp.add_argument("--out", type=Path, help="metrics CSV path (default stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="write the checkpoint cloud as a PLY")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--human-only", action="store_true")
    sp.add_argument("--float32", action="store_true")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("mask", help="silhouette mask via thresholded depth")
    common(sp)
    _inference_args(sp)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--threshold", type=float, help="depth cutoff in meters")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_mask)

    sp = sub.add_parser("timing", help="per-stage inference timing report")
    common(sp)
    _inference_args(sp)
    sp.add_argument("--keep-background", action="store_true")
    sp.add_argument("--out", type=Path, help="CSV report path (default stdout)")
    sp.add_argument("--image-dir", type=Path, help="where timed renders are saved")
    sp.set_defaults(func=cmd_timing)

    sp = sub.add_parser("make-scene", help="generate a synthetic capture for testing")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--joints", type=int, default=8)
    sp.add_argument("--segments", type=int, default=12)
    sp.add_argument("--cameras", type=int, default=4)
    sp.add_argument("--frames", type=int, default=20)
    sp.add_argument("--size", type=int, default=128)
    sp.set_defaults(func=cmd_make_scene)

    return p


def _inference_args(sp):
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--dataset", type=Path, required=True,
                    help="scene root providing the body model and cameras")
    sp.add_argument("--camera", required=True, help="camera id from cameras.txt")
    sp.add_argument("--poses", type=Path, help="pose file (default: dataset poses.txt)")


def load_config(args) -> RunConfig:
    config = RunConfig.from_yaml(args.config) if getattr(args, "config", None) else RunConfig()
    config.apply_overrides(getattr(args, "overrides", []))
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.validate()
    return config


def _load_avatar(args, config: RunConfig) -> AvatarModel:
    body = load_body_model(args.dataset / "body_model.bin")
    state = load_checkpoint(args.checkpoint, body)
    cfg = state.config
    # Inference-side knobs may be overridden without touching the checkpoint.
    cfg.apply_overrides(getattr(args, "overrides", []))
    return AvatarModel(body, state.shape, state.canonical, state.cloud, state.refiner, cfg)


def _camera_and_poses(args):
    cameras = parse_cameras_file(args.dataset / "cameras.txt")
    if args.camera not in cameras:
        raise KeyError(f"unknown camera id {args.camera!r}; have {sorted(cameras)}")
    pose_path = args.poses or (args.dataset / "poses.txt")
    poses = parse_poses_file(pose_path)
    return cameras[args.camera], [poses[k] for k in sorted(poses)]


def cmd_train(args, config: RunConfig) -> int:
    dataset = load_dataset(args.dataset, config, split="train")
    if args.resume:
        state = load_checkpoint(
            args.resume, dataset.body, expected_config=config,
            allow_config_mismatch=args.allow_config_change,
        )
    else:
        state = init_trainer(dataset.body, config, dataset.cameras, dataset.shape)
    run_training(state, dataset, out_dir=args.out, progress_every=args.progress_every)
    save_ply(args.out / "avatar.ply", state.cloud)
    print(f"finished at iteration {state.iteration}; cloud size {len(state.cloud)}")
    return 0


def _pose_at(poses: list[PoseParams], frame: int) -> PoseParams:
    if not 0 <= frame < len(poses):
        raise KeyError(f"pose index {frame} out of range (have {len(poses)})")
    return poses[frame]


def cmd_render(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    camera, poses = _camera_and_poses(args)
    out = render_avatar(model, _pose_at(poses, args.frame), camera,
                        keep_background=args.keep_background)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_rgb(args.out, out.rgb)
    if args.save_depth:
        save_depth16(args.save_depth, out.depth)
    return 0


def cmd_animate(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    camera, poses = _camera_and_poses(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        out = render_avatar(model, pose, camera, keep_background=args.keep_background)
        save_rgb(args.out / f"frame_{i:05d}.png", out.rgb)
    print(f"wrote {len(poses)} frames to {args.out}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    dataset = load_dataset(args.dataset, model.config, split=args.split)
    rows = []
    for frame in dataset.frames:
        gt = load_rgb(frame.image_path)
        out = render_avatar(model, frame.pose, dataset.camera_of(frame),
                            keep_background=not args.filter_background)
        rows.append((frame.camera_id, frame.frame_index,
                     metric_psnr(out.rgb, gt), ssim_value(out.rgb, gt)))
    header = ["camera", "frame", "psnr", "ssim"]
    mean_psnr = float(np.mean([r[2] for r in rows]))
    mean_ssim = float(np.mean([r[3] for r in rows]))
    table = [header] + [[c, str(f), f"{p:.6f}", f"{s:.6f}"] for c, f, p, s in rows]
    table.append(["mean", "", f"{mean_psnr:.6f}", f"{mean_ssim:.6f}"])
    _write_csv(table, args.out)
    return 0


def cmd_export(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    cloud = filter_background(model.cloud) if args.human_only else model.cloud
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_ply(args.out, cloud, float_dtype="f4" if args.float32 else "f8")
    print(f"wrote {len(cloud)} Gaussians to {args.out}")
    return 0


def cmd_mask(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    camera, poses = _camera_and_poses(args)
    threshold = args.threshold if args.threshold is not None else model.config.mask_threshold
    out = render_avatar(model, _pose_at(poses, args.frame), camera, keep_background=False)
    mask = render_mask(out.depth, out.alpha, threshold)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(args.out, mask)
    return 0


def cmd_timing(args, config: RunConfig) -> int:
    model = _load_avatar(args, config)
    camera, poses = _camera_and_poses(args)
    img_dir = args.image_dir or (args.out.parent / "timing_frames" if args.out else Path("timing_frames"))
    img_dir.mkdir(parents=True, exist_ok=True)
    timer = StageTimer()
    for i, pose in enumerate(poses):
        out = render_avatar(model, pose, camera, keep_background=args.keep_background, timer=timer)
        t0 = time.perf_counter()
        save_rgb(img_dir / f"frame_{i:05d}.png", out.rgb)
        timer.add("image_save", time.perf_counter() - t0)
    header, row = timer.report_rows()
    _write_csv([header, [f"{v:.6f}" for v in row]], args.out)
    return 0


def _write_csv(rows: list[list], out: Path | None) -> None:
    if out is None:
        w = csv.writer(sys.stdout)
        for r in rows:
            w.writerow(r)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            for r in rows:
                w.writerow(r)


def cmd_make_scene(args, config: RunConfig) -> int:
    from .body import make_synthetic_body

    body = make_synthetic_body(args.joints, args.segments)
    generate_synthetic_scene(
        body, args.cameras, args.frames, config.seed, args.out,
        width=args.size, height=args.size,
    )
    print(f"wrote synthetic scene to {args.out}")
    return 0
