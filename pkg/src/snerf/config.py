"""Pipeline configuration: JSON sections, defaults and all-at-once validation."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .nerf import HashGridConfig, RenderConfig, TrainConfig
from .styletransfer import MODES, StrotssConfig, WctConfig

DEFAULTS: dict = {
    "seed": 0,
    "out": "run",
    "deterministic": False,
    "volume": {
        "path": None,  # raw/json or NIfTI file; None generates the phantom
        "phantom_seed": 42,
        "dims": [96, 96, 96],
        "transfer_function": "preoperative",
        "crop_radius_mm": 60.0,
    },
    "roi": {
        "center_mm": None,  # None: first surface point along the normal from the volume center
        "diameter_mm": 50.0,
        "normal": [0.0, 0.0, 1.0],
    },
    "poses": {
        "n": 100,
        "width": 96,
        "dist_range_mm": [150.0, 300.0],
        "cone_half_angle_deg": 30.0,
        "roll_range_deg": 15.0,
        "step_mm": None,
        "seed": 1,
    },
    "style": {
        "mode": "hybrid",
        "image": None,  # target image path; None renders one with target_transfer_function
        "target_transfer_function": "intraoperative",
        "target_pose_seed": 999,
        "mask_radius_frac": None,
        "wct": {},
        "strotss": {},
    },
    "nerf": {
        "grid": {},
        "train": {},
        "render": {},
        # also train a reference field on true-style renders (needs a target transfer function)
        "reference": True,
    },
    "eval": {"n_test_poses": 9, "seed": 7},
}

TF_PRESETS = ("preoperative", "intraoperative")


class ConfigError(ValueError):
    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _merge(base: dict, override: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"{where}: unknown field")
        elif isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, where, problems)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _dataclass_section(cls, values, where: str, problems: list):
    if not isinstance(values, dict):
        problems.append(f"{where}: expected an object")
        return None
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    for k in unknown:
        problems.append(f"{where}.{k}: unknown field")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_tf(value, where: str, problems: list) -> None:
    if isinstance(value, str) and value in TF_PRESETS:
        return
    if isinstance(value, str):
        if not Path(value).exists():
            problems.append(f"{where}: neither a preset {TF_PRESETS} nor an existing file: {value!r}")
        return
    problems.append(f"{where}: expected a preset name or a JSON file path")


def _triple(value, where: str, problems: list, positive=False) -> None:
    if not (isinstance(value, (list, tuple)) and len(value) == 3 and all(_is_num(v) for v in value)):
        problems.append(f"{where}: expected three numbers")
    elif positive and min(value) <= 0:
        problems.append(f"{where}: values must be > 0")


class PipelineConfig:
    """Validated pipeline configuration; ``raw`` keeps the merged JSON dict."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.wct = WctConfig(**_tuples(raw["style"]["wct"]))
        self.strotss = StrotssConfig(**_tuples(raw["style"]["strotss"]))
        self.grid = HashGridConfig(**raw["nerf"]["grid"])
        self.train = TrainConfig(**_tuples(raw["nerf"]["train"]))
        self.render = RenderConfig(**_tuples(raw["nerf"]["render"]))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)

    @classmethod
    def from_dict(cls, obj: dict | None = None, **overrides) -> "PipelineConfig":
        """Merge ``obj`` over the defaults, apply non-None overrides and validate everything.

        Every problem found is collected and reported in a single ConfigError.
        """
        problems: list = []
        if obj is not None and not isinstance(obj, dict):
            raise ConfigError(["top level: expected a JSON object"])
        raw = _merge(DEFAULTS, obj or {}, "", problems)
        for key, value in overrides.items():
            if value is not None:
                raw[key] = value
        _validate(raw, problems)
        if problems:
            raise ConfigError(problems)
        return cls(raw)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError([f"config file not found: {path}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
        return cls.from_dict(obj, **overrides)


def _tuples(d: dict) -> dict:
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def _validate(raw: dict, problems: list) -> None:
    if not _is_int(raw["seed"]):
        problems.append("seed: must be an integer")
    if not isinstance(raw["out"], str) or not raw["out"]:
        problems.append("out: must be a non-empty path string")
    if not isinstance(raw["deterministic"], bool):
        problems.append("deterministic: must be true or false")

    vol = raw["volume"]
    if vol["path"] is not None:
        if not isinstance(vol["path"], str) or not Path(vol["path"]).exists():
            problems.append(f"volume.path: file not found: {vol['path']!r}")
    if not _is_int(vol["phantom_seed"]):
        problems.append("volume.phantom_seed: must be an integer")
    dims = vol["dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(_is_int(v) for v in dims)):
        problems.append("volume.dims: expected three integers")
    elif vol["path"] is None and min(dims) < 32:
        problems.append("volume.dims: phantom dims must be >= 32 per axis")
    _check_tf(vol["transfer_function"], "volume.transfer_function", problems)
    if vol["crop_radius_mm"] is not None and not (_is_num(vol["crop_radius_mm"]) and vol["crop_radius_mm"] > 0):
        problems.append("volume.crop_radius_mm: must be > 0 or null")

    roi = raw["roi"]
    if roi["center_mm"] is not None:
        _triple(roi["center_mm"], "roi.center_mm", problems)
    if not (_is_num(roi["diameter_mm"]) and roi["diameter_mm"] > 0):
        problems.append("roi.diameter_mm: must be > 0")
    n_before = len(problems)
    _triple(roi["normal"], "roi.normal", problems)
    if len(problems) == n_before and not any(roi["normal"]):
        problems.append("roi.normal: must be non-zero")

    poses = raw["poses"]
    if not (_is_int(poses["n"]) and poses["n"] >= 1):
        problems.append("poses.n: must be an integer >= 1")
    if not (_is_int(poses["width"]) and poses["width"] >= 8):
        problems.append("poses.width: must be an integer >= 8")
    dr = poses["dist_range_mm"]
    if not (isinstance(dr, list) and len(dr) == 2 and all(_is_num(v) for v in dr) and 0 < dr[0] <= dr[1]):
        problems.append("poses.dist_range_mm: expected [lo, hi] with 0 < lo <= hi")
    if not (_is_num(poses["cone_half_angle_deg"]) and 0 <= poses["cone_half_angle_deg"] <= 90):
        problems.append("poses.cone_half_angle_deg: must lie in [0, 90]")
    if not (_is_num(poses["roll_range_deg"]) and poses["roll_range_deg"] >= 0):
        problems.append("poses.roll_range_deg: must be >= 0")
    if poses["step_mm"] is not None and not (_is_num(poses["step_mm"]) and poses["step_mm"] > 0):
        problems.append("poses.step_mm: must be > 0 or null")
    if not _is_int(poses["seed"]):
        problems.append("poses.seed: must be an integer")

    style = raw["style"]
    if style["mode"] not in MODES:
        problems.append(f"style.mode: must be one of {MODES}")
    if style["image"] is not None and (not isinstance(style["image"], str) or not Path(style["image"]).exists()):
        problems.append(f"style.image: file not found: {style['image']!r}")
    if style["image"] is None:
        _check_tf(style["target_transfer_function"], "style.target_transfer_function", problems)
    if not _is_int(style["target_pose_seed"]):
        problems.append("style.target_pose_seed: must be an integer")
    mrf = style["mask_radius_frac"]
    if mrf is not None and not (_is_num(mrf) and 0 < mrf <= 1):
        problems.append("style.mask_radius_frac: must lie in (0, 1] or be null")
    _dataclass_section(WctConfig, style["wct"], "style.wct", problems)
    strotss = style["strotss"]
    if isinstance(strotss, dict) and "seed" in strotss and not _is_int(strotss["seed"]):
        problems.append("style.strotss.seed: must be an integer")
    _dataclass_section(StrotssConfig, strotss, "style.strotss", problems)

    nerf = raw["nerf"]
    _dataclass_section(HashGridConfig, nerf["grid"], "nerf.grid", problems)
    train = nerf["train"]
    if isinstance(train, dict) and "seed" in train and not _is_int(train["seed"]):
        problems.append("nerf.train.seed: must be an integer")
    _dataclass_section(TrainConfig, train, "nerf.train", problems)
    _dataclass_section(RenderConfig, nerf["render"], "nerf.render", problems)
    if not isinstance(nerf["reference"], bool):
        problems.append("nerf.reference: must be true or false")
    elif nerf["reference"] and style["image"] is not None:
        problems.append("nerf.reference: needs a rendered style target (style.image must be null)")

    ev = raw["eval"]
    if not (_is_int(ev["n_test_poses"]) and ev["n_test_poses"] >= 1):
        problems.append("eval.n_test_poses: must be an integer >= 1")
    if not _is_int(ev["seed"]):
        problems.append("eval.seed: must be an integer")
    if _is_int(ev["seed"]) and _is_int(poses["seed"]) and ev["seed"] == poses["seed"]:
        problems.append("eval.seed: must differ from poses.seed so test poses are disjoint")
