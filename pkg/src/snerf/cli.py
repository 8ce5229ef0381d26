"""Command-line entry point: ``snerf <subcommand> ...``.

Thread count follows the SNERF_NUM_THREADS environment variable.
``--deterministic`` pins torch to one thread and deterministic kernels.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import torch

from .camera import CameraIntrinsics
from .config import ConfigError, PipelineConfig
from .images import read_png, write_png
from .nerf import RenderConfig, load_model, render_view
from .pipeline import (
    RunManifest, StageError, evaluate_sources, load_transfer_function, manifest_path_for, model_intrinsics,
    pose_from_json, prepare_volume, render_style_target, run_dataset, run_pipeline, run_stylize, run_train, stage_seeds,
)
from .posegen import read_dataset, sample_poses
from .styletransfer import stylize
from .volume import gen_phantom, render_volume, save_volume

THREADS_ENV = "SNERF_NUM_THREADS"


def _config(args, **overrides) -> PipelineConfig:
    overrides.setdefault("seed", getattr(args, "seed", None))
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config, **overrides)
    return PipelineConfig.from_dict({}, **overrides)


def _apply_runtime(cfg_deterministic: bool) -> None:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    if cfg_deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _finish(command: str, artifact, seconds: float, config=None, **extra) -> None:
    manifest = RunManifest(command, config)
    manifest.record(command, seconds, {"output": artifact}, **extra)
    manifest.save(manifest_path_for(artifact))
    print(f"wrote {artifact} ({seconds:.1f}s)")


# -------------------------------------------------------------- subcommands


def cmd_gen_phantom(args) -> None:
    t = time.perf_counter()
    vol = gen_phantom(args.seed if args.seed is not None else 42, tuple(args.dims))
    paths = save_volume(vol, args.out)
    _finish("gen-phantom", paths[0], time.perf_counter() - t, seeds={"phantom": args.seed})


def cmd_render_volume(args) -> None:
    cfg = _config(args)
    t = time.perf_counter()
    vol, roi, _ = prepare_volume(cfg)
    tf = load_transfer_function(args.tf or cfg["volume"]["transfer_function"])
    if args.pose:
        pose = pose_from_json(args.pose)
    else:
        pose = sample_poses(roi, 1, seed=args.pose_seed)[0]
    intr = CameraIntrinsics.default(args.width or cfg["poses"]["width"])
    write_png(args.out, render_volume(vol, tf, pose, intr, step_mm=cfg["poses"]["step_mm"]))
    _finish("render-volume", Path(args.out), time.perf_counter() - t, cfg.to_json())


def cmd_gen_dataset(args) -> None:
    cfg = _config(args)
    t = time.perf_counter()
    run_dataset(cfg, args.out)
    _finish("gen-dataset", Path(args.out), time.perf_counter() - t, cfg.to_json(), seeds={"poses": cfg["poses"]["seed"]})


def cmd_stylize(args) -> None:
    cfg = _config(args)
    if args.mode:
        cfg.raw["style"]["mode"] = args.mode
        cfg = PipelineConfig.from_dict(cfg.raw)
    t = time.perf_counter()
    content = Path(args.content)
    if args.style is None:
        args.style = str(Path(args.out).with_suffix("")) + "_target.png"
        render_style_target(cfg, args.style)
    if content.is_dir():
        run_stylize(cfg, content, args.style, args.out, progress=lambda i, n: print(f"  frame {i}/{n}", flush=True))
    else:
        strotss = dataclasses.replace(cfg.strotss, seed=stage_seeds(cfg)["strotss"])
        out = stylize(read_png(content), read_png(args.style), cfg["style"]["mode"], cfg.wct, strotss)
        write_png(args.out, out)
    _finish("stylize", Path(args.out), time.perf_counter() - t, cfg.to_json(),
            inputs={"content": content, "style": args.style}, seeds={"strotss": stage_seeds(cfg)["strotss"]})


def cmd_train(args) -> None:
    cfg = _config(args)
    _apply_runtime(cfg["deterministic"])
    t = time.perf_counter()

    def progress(i, n, loss):
        if i == 1 or i % 100 == 0 or i == n:
            print(f"  iteration {i}/{n} loss {loss:.6f}", flush=True)

    info = run_train(cfg, args.dataset, args.out, progress=progress)
    _finish("train", Path(args.out), time.perf_counter() - t, cfg.to_json(), inputs={"dataset": args.dataset},
            seeds={"train": stage_seeds(cfg)["train"]}, **info)


def cmd_render(args) -> None:
    t = time.perf_counter()
    model = load_model(args.model)
    intr, background = model_intrinsics(args.model)
    if Path(args.pose).exists():
        pose = pose_from_json(args.pose)
    else:
        if args.dataset is None:
            raise ValueError("--pose as a frame index needs --dataset")
        ds = read_dataset(args.dataset)
        pose = ds.poses[int(args.pose)]
        intr = ds.intrinsics
    if args.width:
        intr = CameraIntrinsics.default(args.width)
    if intr is None:
        raise ValueError("the checkpoint stores no intrinsics; pass --width")
    rcfg = RenderConfig(n_samples=args.samples, background=background, seed=args.seed or 0)
    write_png(args.out, render_view(model, pose, intr, rcfg))
    _finish("render", Path(args.out), time.perf_counter() - t, inputs={"model": args.model, "pose": args.pose})


def cmd_evaluate(args) -> None:
    t = time.perf_counter()
    report = evaluate_sources(args.a, args.b, args.poses)
    report.save(args.out)
    print(report.table("agreement"))
    _finish("evaluate", Path(args.out), time.perf_counter() - t, inputs={"a": args.a, "b": args.b})


def cmd_pipeline(args) -> None:
    cfg = _config(args, out=args.out)
    _apply_runtime(cfg["deterministic"])
    run_pipeline(cfg, log=lambda msg: print(msg, flush=True))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snerf", description="Stylized single-image radiance fields from a voxel volume.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_help="output path"):
        if config:
            sp.add_argument("--config", help="pipeline configuration JSON")
        sp.add_argument("--seed", type=int, help="global seed override")
        sp.add_argument("--deterministic", action="store_true", help="force deterministic execution")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("gen-phantom", help="generate the synthetic head phantom volume")
    common(sp, config=False, out_help="volume file (.raw with .json sidecar, or .nii)")
    sp.add_argument("--dims", type=int, nargs=3, default=[96, 96, 96])
    sp.set_defaults(func=cmd_gen_phantom)

    sp = sub.add_parser("render-volume", help="ray-cast one view of the configured volume")
    common(sp, out_help="PNG image")
    sp.add_argument("--tf", help="transfer function preset or JSON file")
    sp.add_argument("--pose", help="JSON file holding a 4x4 camera-to-world matrix")
    sp.add_argument("--pose-seed", type=int, default=0, help="seed of a random ROI pose when --pose is absent")
    sp.add_argument("--width", type=int)
    sp.set_defaults(func=cmd_render_volume)

    sp = sub.add_parser("gen-dataset", help="render the posed preoperative dataset")
    common(sp, out_help="dataset directory")
    sp.set_defaults(func=cmd_gen_dataset)

    sp = sub.add_parser("stylize", help="transfer a target image's appearance onto an image or dataset")
    common(sp, out_help="PNG image or dataset directory")
    sp.add_argument("--content", required=True, help="PNG image or dataset directory")
    sp.add_argument("--style", help="target PNG; default renders one from the config")
    sp.add_argument("--mode", choices=("wct", "strotss", "hybrid"))
    sp.set_defaults(func=cmd_stylize)

    sp = sub.add_parser("train", help="fit the radiance field to a dataset")
    common(sp, out_help="checkpoint file (.snrf)")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render a view from a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pose", required=True, help="JSON pose file, or a frame index into --dataset")
    sp.add_argument("--dataset")
    sp.add_argument("--width", type=int)
    sp.add_argument("--samples", type=int, default=96)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("evaluate", help="SSIM / PSNR / GMS agreement between two view sets")
    sp.add_argument("--a", required=True, help="dataset directory or checkpoint")
    sp.add_argument("--b", required=True, help="dataset directory or checkpoint")
    sp.add_argument("--poses", help="dataset directory whose poses checkpoints are rendered at")
    sp.add_argument("--out", required=True, help="report JSON")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="dataset -> stylize -> train -> evaluate")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--deterministic", action="store_true")
    sp.add_argument("--out", help="output directory (overrides the config)")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command not in ("train", "pipeline"):
        _apply_runtime(getattr(args, "deterministic", False))
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
