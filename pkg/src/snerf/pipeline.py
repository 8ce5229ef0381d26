"""Pipeline stages shared by the CLI subcommands.

Every stage reads its inputs from disk and writes its artifact to disk, so
any stage can be rerun on its own; `RunManifest` records inputs, seeds,
timings and sha256 hashes of the outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .camera import CameraIntrinsics, CameraPose
from .config import PipelineConfig
from .images import quantize, read_png, write_png
from .metrics import MetricsReport, evaluate_agreement
from .nerf import (
    ModelConfig, RadianceFieldModel, RenderConfig, TrainConfig, load_model, read_checkpoint, render_view, save_model, train,
)
from .posegen import PosedDataset, RoiSpec, build_dataset, read_dataset, roi_scene_aabb, sample_poses, write_dataset
from .styletransfer import circular_mask, stylize_dataset
from .volume import TransferFunction, find_surface, gen_phantom, isolate_surface, load_volume, render_volume


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------- manifests


def sha256_path(path) -> str:
    """Hash of a file, or of a directory's sorted relative paths and file contents."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


class RunManifest:
    def __init__(self, command: str, config: dict | None = None):
        self.data = {
            "command": command,
            "version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "config": config,
            "stages": [],
        }

    def record(self, stage: str, seconds: float, outputs: dict, inputs: dict | None = None, seeds: dict | None = None, **extra):
        entry = {
            "stage": stage,
            "seconds": round(seconds, 3),
            "inputs": {k: str(v) for k, v in (inputs or {}).items()},
            "seeds": seeds or {},
            "outputs": {k: {"path": str(v), "sha256": sha256_path(v)} for k, v in outputs.items()},
        }
        entry.update(extra)
        self.data["stages"].append(entry)
        return entry

    def timings(self) -> dict:
        return {s["stage"]: s["seconds"] for s in self.data["stages"]}

    def save(self, path) -> Path:
        path = Path(path)
        self.data["timings_s"] = self.timings()
        path.write_text(json.dumps(self.data, indent=2, default=str))
        return path


def manifest_path_for(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.parent / (artifact.name + ".manifest.json")


# ------------------------------------------------------------------ helpers


def load_transfer_function(spec) -> TransferFunction:
    if spec == "preoperative":
        return TransferFunction.preoperative()
    if spec == "intraoperative":
        return TransferFunction.intraoperative()
    return TransferFunction.from_json(json.loads(Path(spec).read_text()))


def stage_seeds(cfg: PipelineConfig) -> dict:
    """Seeds not pinned in their section follow the global seed."""
    g = cfg["seed"]
    return {
        "strotss": cfg["style"]["strotss"].get("seed", g),
        "train": cfg["nerf"]["train"].get("seed", g),
    }


def prepare_volume(cfg: PipelineConfig) -> tuple:
    """Volume (cropped around the ROI), ROI and scene box, as configured."""
    vc, rc = cfg["volume"], cfg["roi"]
    vol = load_volume(vc["path"]) if vc["path"] else gen_phantom(vc["phantom_seed"], tuple(vc["dims"]))
    normal = np.asarray(rc["normal"], dtype=np.float64)
    normal /= np.linalg.norm(normal)
    center = np.asarray(rc["center_mm"], dtype=np.float64) if rc["center_mm"] is not None else find_surface(vol, normal)
    roi = RoiSpec(tuple(center), rc["diameter_mm"], tuple(normal))
    if vc["crop_radius_mm"] is not None:
        vol = isolate_surface(vol, center, vc["crop_radius_mm"])
        aabb = roi_scene_aabb(roi, vc["crop_radius_mm"])
    else:
        lo, hi = vol.bounds_mm()
        c, half = (lo + hi) / 2, np.max(hi - lo) / 2 * 1.1
        aabb = np.stack([c - half, c + half])
    return vol, roi, aabb


def intrinsics_for(cfg: PipelineConfig) -> CameraIntrinsics:
    return CameraIntrinsics.default(cfg["poses"]["width"])


def pose_kwargs(cfg: PipelineConfig) -> dict:
    pc = cfg["poses"]
    return {
        "dist_range_mm": tuple(pc["dist_range_mm"]),
        "cone_half_angle_deg": pc["cone_half_angle_deg"],
        "roll_range_deg": pc["roll_range_deg"],
    }


def scene_box(ds: PosedDataset) -> np.ndarray:
    """The dataset's scene box, else a cube around camera centers and ROI with 10% margin."""
    if ds.scene_aabb_mm is not None:
        return np.asarray(ds.scene_aabb_mm, dtype=np.float64)
    pts = [p.position for p in ds.poses]
    if ds.roi is not None:
        pts.append(np.asarray(ds.roi.center_mm))
    pts = np.array(pts)
    lo, hi = pts.min(0), pts.max(0)
    c, half = (lo + hi) / 2, max(np.max(hi - lo) / 2, 1e-3) * 1.1
    return np.stack([c - half, c + half])


def intrinsics_json(intr: CameraIntrinsics) -> dict:
    return {"width": intr.width, "height": intr.height, "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}


# ------------------------------------------------------------------- stages


def run_dataset(cfg: PipelineConfig, out_dir, tf_key: str = "transfer_function", provenance: str = "preoperative",
                poses=None) -> PosedDataset:
    vol, roi, aabb = prepare_volume(cfg)
    spec = cfg["volume"][tf_key] if tf_key == "transfer_function" else cfg["style"][tf_key]
    tf = load_transfer_function(spec)
    if poses is None:
        poses = sample_poses(roi, cfg["poses"]["n"], seed=cfg["poses"]["seed"], **pose_kwargs(cfg))
    ds = build_dataset(vol, tf, poses, intrinsics_for(cfg), step_mm=cfg["poses"]["step_mm"], roi=roi, scene_aabb_mm=aabb)
    ds = ds.with_images([quantize(im) for im in ds.images], provenance)
    write_dataset(ds, out_dir)
    return read_dataset(out_dir)


def render_style_target(cfg: PipelineConfig, out_path) -> np.ndarray:
    """The single target image: a file from the config, or a render with the target transfer function."""
    sc = cfg["style"]
    if sc["image"]:
        img = read_png(sc["image"])
    else:
        vol, roi, _ = prepare_volume(cfg)
        pose = sample_poses(roi, 1, seed=sc["target_pose_seed"], **pose_kwargs(cfg))[0]
        img = render_volume(vol, load_transfer_function(sc["target_transfer_function"]), pose, intrinsics_for(cfg),
                            step_mm=cfg["poses"]["step_mm"])
    write_png(out_path, img)
    return read_png(out_path)


def run_stylize(cfg: PipelineConfig, dataset_dir, style_path, out_dir, progress=None) -> PosedDataset:
    ds = read_dataset(dataset_dir)
    style = read_png(style_path)
    sc = cfg["style"]
    mask = None
    if sc["mask_radius_frac"] is not None:
        h, w = ds.intrinsics.height, ds.intrinsics.width
        mask = circular_mask(h, w, sc["mask_radius_frac"])
    strotss = dataclasses.replace(cfg.strotss, seed=stage_seeds(cfg)["strotss"])
    out = stylize_dataset(ds, style, sc["mode"], cfg.wct, strotss, style_mask=mask, progress=progress)
    write_dataset(out, out_dir)
    return read_dataset(out_dir)


def train_config(cfg: PipelineConfig) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=stage_seeds(cfg)["train"], deterministic=cfg.train.deterministic or cfg["deterministic"])


def run_train(cfg: PipelineConfig, dataset_dir, model_path, progress=None) -> dict:
    ds = read_dataset(dataset_dir)
    tcfg = train_config(cfg)
    model = RadianceFieldModel(ModelConfig(encoding=cfg.grid, aabb_mm=tuple(map(tuple, scene_box(ds)))), seed=tcfg.seed)
    rcfg = dataclasses.replace(cfg.render, jitter=True, background=ds.background)
    result = train(model, ds, tcfg, rcfg, progress=progress)
    extra = {"intrinsics": intrinsics_json(ds.intrinsics), "background": list(ds.background)}
    save_model(model, model_path, extra=extra)
    return {
        "train_seconds": result.seconds,
        "iterations": len(result.loss_history),
        "loss_first": result.loss_history[0],
        "loss_final": result.loss_history[-1],
        "rays_used": result.rays_used,
        "rays_total": result.rays_total,
    }


def eval_render_config(cfg: PipelineConfig, background) -> RenderConfig:
    return dataclasses.replace(cfg.render, background=tuple(background))


def render_poses(model, poses: list, intr: CameraIntrinsics, rcfg: RenderConfig) -> list:
    return [quantize(render_view(model, p, intr, rcfg)) for p in poses]


def eval_poses(cfg: PipelineConfig, roi: RoiSpec) -> list:
    return sample_poses(roi, cfg["eval"]["n_test_poses"], seed=cfg["eval"]["seed"], **pose_kwargs(cfg))


def write_views(directory, poses, images, intr: CameraIntrinsics, roi=None, background=(0.0, 0.0, 0.0)) -> PosedDataset:
    ds = PosedDataset(intr, list(zip(poses, images)), "captured", tuple(background), None, roi)
    write_dataset(ds, directory)
    return ds


def run_pipeline(cfg: PipelineConfig, log=print) -> dict:
    """dataset -> style target -> stylize -> train -> (reference) -> evaluate, all under ``cfg.out``."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    manifest = RunManifest("pipeline", cfg.to_json())
    seeds = stage_seeds(cfg)

    def stage(name, fn):
        log(f"[{name}] running")
        t = time.perf_counter()
        try:
            value = fn()
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            manifest.data["failed_stage"] = name
            manifest.data["error"] = str(exc)
            manifest.save(out / "manifest.json")
            raise StageError(name, str(exc)) from exc
        dt = time.perf_counter() - t
        log(f"[{name}] done in {dt:.1f}s")
        return value, dt

    _, dt = stage("dataset", lambda: run_dataset(cfg, out / "dataset"))
    manifest.record("dataset", dt, {"dataset": out / "dataset"}, seeds={"poses": cfg["poses"]["seed"],
                                                                        "phantom": cfg["volume"]["phantom_seed"]})
    _, dt = stage("style-target", lambda: render_style_target(cfg, out / "style_target.png"))
    manifest.record("style-target", dt, {"style_target": out / "style_target.png"},
                    seeds={"target_pose": cfg["style"]["target_pose_seed"]})
    _, dt = stage("stylize", lambda: run_stylize(cfg, out / "dataset", out / "style_target.png", out / "stylized"))
    manifest.record("stylize", dt, {"stylized": out / "stylized"}, inputs={"dataset": out / "dataset"},
                    seeds={"strotss": seeds["strotss"]}, per_image_seconds=dt / cfg["poses"]["n"])
    info, dt = stage("train", lambda: run_train(cfg, out / "stylized", out / "model.snrf"))
    manifest.record("train", dt, {"model": out / "model.snrf"}, inputs={"dataset": out / "stylized"},
                    seeds={"train": seeds["train"]}, **info)

    _, roi, _ = prepare_volume(cfg)
    model = load_model(out / "model.snrf")
    intr = intrinsics_for(cfg)
    rcfg = eval_render_config(cfg, read_dataset(out / "stylized").background)
    poses = eval_poses(cfg, roi)

    if cfg["nerf"]["reference"]:
        ref_poses = read_dataset(out / "dataset").poses
        _, dt = stage("reference-dataset", lambda: run_dataset(cfg, out / "reference", "target_transfer_function",
                                                                "captured", poses=ref_poses))
        manifest.record("reference-dataset", dt, {"reference": out / "reference"})
        info, dt = stage("reference-train", lambda: run_train(cfg, out / "reference", out / "model_reference.snrf"))
        manifest.record("reference-train", dt, {"model": out / "model_reference.snrf"},
                        inputs={"dataset": out / "reference"}, seeds={"train": seeds["train"]}, **info)

        def evaluate():
            ref_model = load_model(out / "model_reference.snrf")
            a = render_poses(model, poses, intr, rcfg)
            b = render_poses(ref_model, poses, intr, rcfg)
            write_views(out / "test" / "single", poses, a, intr, roi, rcfg.background)
            write_views(out / "test" / "reference", poses, b, intr, roi, rcfg.background)
            return evaluate_agreement(a, b, labels=[f"test_{i}" for i in range(len(poses))])
    else:
        def evaluate():
            # no reference views exist: score the fit on the stylized training views
            ds = read_dataset(out / "stylized")
            a = render_poses(model, ds.poses, intr, rcfg)
            return evaluate_agreement(a, ds.images, labels=[f"train_{i}" for i in range(len(ds))])

    report, dt = stage("evaluate", evaluate)
    report.save(out / "report.json")
    manifest.record("evaluate", dt, {"report": out / "report.json"}, seeds={"eval": cfg["eval"]["seed"]})
    manifest.save(out / "manifest.json")
    log(report.table("agreement"))
    return {"report": report, "manifest": manifest.data}


def evaluate_sources(a, b, poses_dir=None, render_cfg: RenderConfig | None = None, gms_levels: int = 3) -> MetricsReport:
    """Agreement between two view sets, each a dataset directory or a checkpoint rendered at ``poses_dir``'s poses."""
    ref = read_dataset(poses_dir) if poses_dir is not None else None

    def views(src):
        src = Path(src)
        if src.is_dir():
            return read_dataset(src)
        if ref is None:
            raise ValueError(f"{src} is a model; --poses <dataset dir> is required to render it")
        model = load_model(src)
        rcfg = render_cfg or RenderConfig(background=ref.background)
        return PosedDataset(ref.intrinsics, list(zip(ref.poses, render_poses(model, ref.poses, ref.intrinsics, rcfg))),
                            "captured", ref.background)

    da, db = views(a), views(b)
    if len(da) != len(db):
        raise ValueError(f"view count mismatch: {len(da)} vs {len(db)}")
    return evaluate_agreement(da.images, db.images, labels=[f"view_{i}" for i in range(len(da))], gms_levels=gms_levels)


def pose_from_json(path) -> CameraPose:
    obj = json.loads(Path(path).read_text())
    m = obj.get("transform_matrix", obj) if isinstance(obj, dict) else obj
    return CameraPose(np.asarray(m, dtype=np.float64).reshape(4, 4))


def model_intrinsics(path) -> tuple:
    config, _ = read_checkpoint(path)
    extra = config.get("extra", {})
    intr = extra.get("intrinsics")
    return (CameraIntrinsics(**intr) if intr else None), tuple(extra.get("background", (0.0, 0.0, 0.0)))


__all__ = [
    "RunManifest", "StageError", "eval_poses", "evaluate_sources", "load_transfer_function", "manifest_path_for",
    "model_intrinsics", "pose_from_json", "prepare_volume", "render_poses", "render_style_target",
    "run_dataset", "run_pipeline", "run_stylize", "run_train", "scene_box", "sha256_path",
]
