"""Preoperative camera poses around a craniotomy ROI and posed image datasets.

Datasets are stored in the NeRF-synthetic layout: ``transforms.json`` plus
``images/NNNN.png``. Extra keys (``provenance``, ``background``, ``roi``,
``scene_aabb_mm``) are ignored by other readers of the format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose, look_at
from .images import read_png, write_png
from .volume import TransferFunction, VoxelVolume, render_volume

PROVENANCES = ("preoperative", "stylized", "captured")


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    """transforms.json is malformed."""


class MissingFrameError(DatasetError):
    """A frame references an image that does not exist."""


@dataclass(frozen=True)
class RoiSpec:
    center_mm: tuple[float, float, float]
    diameter_mm: float = 50.0
    outward_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise ValueError("ROI diameter must be positive")
        n = np.asarray(self.outward_normal, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError(f"outward_normal must be a unit vector, got {self.outward_normal}")
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "outward_normal", tuple(float(c) for c in n))


@dataclass
class PosedDataset:
    intrinsics: CameraIntrinsics
    frames: list  # [(CameraPose, image)]
    provenance: str = "preoperative"
    background: tuple = (0.0, 0.0, 0.0)
    scene_aabb_mm: np.ndarray | None = None  # (2, 3) min/max corners
    roi: RoiSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("a dataset needs at least one frame")
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown provenance {self.provenance!r}")
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for i, (_, img) in enumerate(self.frames):
            if img.shape != shape:
                raise DatasetError(f"frame {i} has shape {img.shape}, intrinsics imply {shape}")

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self) -> list[CameraPose]:
        return [p for p, _ in self.frames]

    @property
    def images(self) -> list[np.ndarray]:
        return [im for _, im in self.frames]

    def with_images(self, images, provenance: str) -> "PosedDataset":
        if len(images) != len(self.frames):
            raise DatasetError("image count does not match frame count")
        return replace(self, frames=[(p, im) for p, im in zip(self.poses, images)], provenance=provenance)


def _orthonormal_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[np.argmin(np.abs(n))]
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(n, a)


def sample_poses(
    roi: RoiSpec,
    n: int,
    dist_range_mm=(150.0, 300.0),
    cone_half_angle_deg: float = 30.0,
    roll_range_deg: float = 15.0,
    seed: int = 0,
) -> list[CameraPose]:
    """Cameras on a spherical cap above the ROI, all looking at its center.

    Directions are uniform over the cap of half-angle ``cone_half_angle_deg``
    around the outward normal, distances uniform in ``dist_range_mm`` and
    roll uniform in ``+-roll_range_deg``.
    """
    lo, hi = dist_range_mm
    if n < 0:
        raise ValueError("pose count must be >= 0")
    if not 0 < lo <= hi:
        raise ValueError(f"invalid distance range {dist_range_mm}")
    if not 0 <= cone_half_angle_deg <= 90:
        raise ValueError("cone half-angle must lie in [0, 90] degrees")
    if roll_range_deg < 0:
        raise ValueError("roll range must be >= 0")
    rng = np.random.default_rng(seed)
    center = np.asarray(roi.center_mm)
    normal = np.asarray(roi.outward_normal)
    a, b = _orthonormal_frame(normal)
    cos_max = math.cos(math.radians(cone_half_angle_deg))
    # a reference up direction orthogonal to the normal keeps roll meaningful
    up_hint = b
    poses = []
    for _ in range(n):
        cos_t = rng.uniform(cos_max, 1.0)
        phi = rng.uniform(0.0, 2 * math.pi)
        dist = rng.uniform(lo, hi)
        roll = rng.uniform(-roll_range_deg, roll_range_deg)
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        direction = cos_t * normal + sin_t * (math.cos(phi) * a + math.sin(phi) * b)
        poses.append(look_at(center + dist * direction, center, up=up_hint, roll_deg=roll))
    return poses


def build_dataset(
    vol: VoxelVolume,
    tf: TransferFunction,
    poses: list[CameraPose],
    intr: CameraIntrinsics,
    step_mm: float | None = None,
    background=(0.0, 0.0, 0.0),
    roi: RoiSpec | None = None,
    scene_aabb_mm=None,
) -> PosedDataset:
    """Render one view per pose; frame order follows ``poses``."""
    if not poses:
        raise DatasetError("build_dataset needs at least one pose")
    frames = [(p, render_volume(vol, tf, p, intr, step_mm=step_mm, background=background)) for p in poses]
    return PosedDataset(
        intr, frames, "preoperative", tuple(background),
        None if scene_aabb_mm is None else np.asarray(scene_aabb_mm, dtype=np.float64), roi,
    )


def roi_scene_aabb(roi: RoiSpec, radius_mm: float, margin: float = 0.1) -> np.ndarray:
    """Cube enclosing the ROI crop sphere, enlarged by ``margin`` of its size."""
    c = np.asarray(roi.center_mm)
    half = radius_mm * (1.0 + margin)
    return np.stack([c - half, c + half])


# ------------------------------------------------------------------ disk format


def write_dataset(ds: PosedDataset, directory) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    intr = ds.intrinsics
    frames = []
    for i, (pose, img) in enumerate(ds.frames):
        rel = f"./images/{i:04d}.png"
        write_png(d / rel, img)
        frames.append({"file_path": rel, "transform_matrix": pose.transform.tolist()})
    manifest = {
        "camera_angle_x": intr.camera_angle_x,
        "fl_x": intr.fx,
        "fl_y": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "w": intr.width,
        "h": intr.height,
        "provenance": ds.provenance,
        "background": list(ds.background),
        "frames": frames,
    }
    if ds.scene_aabb_mm is not None:
        manifest["scene_aabb_mm"] = np.asarray(ds.scene_aabb_mm).tolist()
    if ds.roi is not None:
        manifest["roi"] = {
            "center_mm": list(ds.roi.center_mm),
            "diameter_mm": ds.roi.diameter_mm,
            "outward_normal": list(ds.roi.outward_normal),
        }
    if ds.meta:
        manifest["meta"] = ds.meta
    (d / "transforms.json").write_text(json.dumps(manifest, indent=2))
    return d / "transforms.json"


def _parse_pose(i: int, entry) -> CameraPose:
    try:
        m = np.array(entry["transform_matrix"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"frame {i}: unreadable transform_matrix ({exc})") from exc
    if m.size != 16:
        raise ManifestError(f"frame {i}: transform_matrix has {m.size} entries, expected 16")
    try:
        return CameraPose(m.reshape(4, 4))
    except ValueError as exc:
        raise ManifestError(f"frame {i}: {exc}") from exc


def read_dataset(directory) -> PosedDataset:
    d = Path(directory)
    path = d / "transforms.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    try:
        w, h = int(manifest["w"]), int(manifest["h"])
        fx = float(manifest.get("fl_x", 0.0)) or 0.5 * w / math.tan(0.5 * float(manifest["camera_angle_x"]))
        fy = float(manifest.get("fl_y", fx))
        intr = CameraIntrinsics(w, h, fx, fy, float(manifest.get("cx", w / 2)), float(manifest.get("cy", h / 2)))
        entries = manifest["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: 'frames' must be a non-empty list")
    frames = []
    for i, entry in enumerate(entries):
        pose = _parse_pose(i, entry)
        if "file_path" not in entry:
            raise ManifestError(f"frame {i}: missing file_path")
        img_path = d / entry["file_path"]
        if not img_path.exists() and not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise MissingFrameError(f"frame {i}: image file {img_path} not found")
        frames.append((pose, read_png(img_path)))
    roi = None
    if "roi" in manifest:
        r = manifest["roi"]
        roi = RoiSpec(tuple(r["center_mm"]), r["diameter_mm"], tuple(r["outward_normal"]))
    aabb = manifest.get("scene_aabb_mm")
    return PosedDataset(
        intr, frames, manifest.get("provenance", "captured"), tuple(manifest.get("background", (0.0, 0.0, 0.0))),
        None if aabb is None else np.asarray(aabb, dtype=np.float64), roi, manifest.get("meta", {}),
    )
