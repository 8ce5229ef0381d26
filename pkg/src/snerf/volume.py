"""Voxel volumes: ingestion, a synthetic head phantom and ray-cast rendering.

World coordinates are millimetres. Voxel ``(i, j, k)`` has its center at
``origin_mm + (i, j, k) * spacing_mm``. Values outside the voxel lattice are
zero, so interpolation fades to zero within one voxel of the outermost
centers and any point further out samples exactly 0.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, CameraPose, pixel_rays


class VolumeFormatError(ValueError):
    """Base class for volume ingestion failures."""


class HeaderError(VolumeFormatError):
    """Header or sidecar metadata is missing or corrupt."""


class UnsupportedDtypeError(VolumeFormatError):
    pass


class SizeMismatchError(VolumeFormatError):
    """Payload length disagrees with the declared dimensions."""


_RAW_DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
_NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}

PHANTOM_EXTENT_MM = 192.0


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    intensities: np.ndarray  # (nx, ny, nz), float32 in [0, 1]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.intensities, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 2:
            raise ValueError(f"volume dims must be three values >= 2, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if len(origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin_mm}")
        if not np.isfinite(data).all() or data.min() < 0 or data.max() > 1:
            raise ValueError("intensities must be finite and lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "intensities", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.intensities.shape)

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Box outside of which every sample is zero."""
        o = np.array(self.origin_mm)
        s = np.array(self.spacing_mm)
        return o - s, o + np.array(self.dims) * s

    def center_mm(self) -> np.ndarray:
        return np.array(self.origin_mm) + (np.array(self.dims) - 1) * np.array(self.spacing_mm) / 2


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear intensity -> (rgb, opacity per mm) map with headlight shading."""

    control_points: tuple  # ((intensity, (r, g, b), opacity_per_mm), ...)
    ambient: float = 0.35
    diffuse: float = 0.65

    def __post_init__(self):
        pts = tuple((float(s), tuple(float(c) for c in rgb), float(op)) for s, rgb, op in self.control_points)
        if len(pts) < 2:
            raise ValueError("a transfer function needs at least 2 control points")
        xs = [p[0] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("control point intensities must be strictly increasing")
        for s, rgb, op in pts:
            if not 0 <= s <= 1 or len(rgb) != 3 or not all(0 <= c <= 1 for c in rgb) or op < 0:
                raise ValueError(f"invalid control point {(s, rgb, op)}")
        for name in ("ambient", "diffuse"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "control_points", pts)

    def arrays(self):
        xs = np.array([p[0] for p in self.control_points])
        rgb = np.array([p[1] for p in self.control_points])
        op = np.array([p[2] for p in self.control_points])
        return xs, rgb, op

    def __call__(self, intensity):
        """Evaluate (rgb, opacity_per_mm) for an array of intensities."""
        xs, rgb, op = self.arrays()
        s = np.asarray(intensity, dtype=np.float64)
        color = np.stack([np.interp(s, xs, rgb[:, c]) for c in range(3)], axis=-1)
        return color, np.interp(s, xs, op)

    def to_json(self) -> dict:
        return {
            "control_points": [[s, list(rgb), op] for s, rgb, op in self.control_points],
            "ambient": self.ambient,
            "diffuse": self.diffuse,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransferFunction":
        return cls(
            tuple((p[0], tuple(p[1]), p[2]) for p in obj["control_points"]),
            ambient=obj.get("ambient", 0.35),
            diffuse=obj.get("diffuse", 0.65),
        )

    @classmethod
    def preoperative(cls) -> "TransferFunction":
        """Neutral surface rendering of the phantom (MRI-derived look)."""
        return cls((
            (0.00, (0.00, 0.00, 0.00), 0.0),
            (0.20, (0.70, 0.68, 0.66), 0.0),
            (0.35, (0.78, 0.76, 0.73), 0.25),
            (0.60, (0.93, 0.91, 0.87), 0.35),
            (0.72, (0.55, 0.56, 0.66), 1.2),
            (0.95, (0.36, 0.37, 0.52), 1.5),
            (1.00, (0.36, 0.37, 0.52), 1.5),
        ))

    @classmethod
    def intraoperative(cls) -> "TransferFunction":
        """Same geometry as `preoperative`, coloured like exposed cortex under a microscope."""
        return cls((
            (0.00, (0.00, 0.00, 0.00), 0.0),
            (0.20, (0.72, 0.45, 0.40), 0.0),
            (0.35, (0.82, 0.52, 0.46), 0.25),
            (0.60, (0.96, 0.72, 0.62), 0.35),
            (0.72, (0.72, 0.16, 0.14), 1.2),
            (0.95, (0.45, 0.07, 0.14), 1.5),
            (1.00, (0.45, 0.07, 0.14), 1.5),
        ))


# --------------------------------------------------------------------------- I/O


def _normalize(raw: np.ndarray) -> np.ndarray:
    data = raw.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi > lo:
        return ((data - lo) / (hi - lo)).astype(np.float32)
    # constant volume: nothing to stretch, keep the value if already in range
    return np.clip(data, 0.0, 1.0).astype(np.float32)


def _load_raw(raw_path: Path, meta_path: Path) -> VoxelVolume:
    try:
        meta = json.loads(meta_path.read_text())
        dims = [int(n) for n in meta["dims"]]
        spacing = [float(s) for s in meta["spacing_mm"]]
        origin = [float(o) for o in meta.get("origin_mm", [0.0, 0.0, 0.0])]
        dtype_name = meta["dtype"]
    except FileNotFoundError as exc:
        raise HeaderError(f"missing sidecar metadata {meta_path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"corrupt sidecar metadata {meta_path}: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise HeaderError(f"{meta_path}: dims and spacing_mm need 3 entries")
    if meta.get("endianness", "little") != "little":
        raise UnsupportedDtypeError("only little-endian raw volumes are supported")
    if dtype_name not in _RAW_DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype_name!r}; expected one of {sorted(_RAW_DTYPES)}")
    dtype = _RAW_DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    expected = math.prod(dims) * dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{raw_path}: payload is {len(payload)} bytes, dims {dims} x {dtype_name} need {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(dims[::-1]).transpose(2, 1, 0)
    return VoxelVolume(_normalize(data), tuple(spacing), tuple(origin))


def _load_nifti(path: Path) -> VoxelVolume:
    blob = path.read_bytes()
    if len(blob) < 352:
        raise HeaderError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        raise HeaderError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian)")
    if blob[344:348] != b"n+1\x00":
        raise HeaderError(f"{path}: bad magic {blob[344:348]!r}")
    dim = struct.unpack_from("<8h", blob, 40)
    datatype, _bitpix = struct.unpack_from("<2h", blob, 70)
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    qoffset = struct.unpack_from("<3f", blob, 268)
    if blob[348] != 0:
        raise HeaderError(f"{path}: header extensions are not supported")
    if not (dim[0] == 3 or (dim[0] == 4 and dim[4] == 1)):
        raise HeaderError(f"{path}: expected a 3-D scalar volume, dim[0]={dim[0]}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"{path}: NIfTI datatype {datatype} not supported (2, 4, 16 only)")
    dims = [int(d) for d in dim[1:4]]
    if min(dims) < 1:
        raise HeaderError(f"{path}: invalid dims {dims}")
    dtype = _NIFTI_DTYPES[datatype]
    start = int(vox_offset)
    expected = math.prod(dims) * dtype.itemsize
    if len(blob) - start != expected:
        raise SizeMismatchError(
            f"{path}: payload is {len(blob) - start} bytes, dims {dims} need {expected}"
        )
    data = np.frombuffer(blob, dtype=dtype, offset=start).reshape(dims[::-1]).transpose(2, 1, 0)
    spacing = tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4])
    return VoxelVolume(_normalize(data), spacing, tuple(float(q) for q in qoffset))


def load_volume(path) -> VoxelVolume:
    """Load a raw volume (``.raw`` + ``.json`` sidecar) or a minimal NIfTI-1 file.

    Intensities are min-max normalized to [0, 1].
    """
    path = Path(path)
    if path.suffix == ".nii":
        return _load_nifti(path)
    if path.suffix in (".raw", ".json"):
        raw_path, meta_path = path.with_suffix(".raw"), path.with_suffix(".json")
        if not raw_path.exists():
            raise FileNotFoundError(raw_path)
        return _load_raw(raw_path, meta_path)
    raise VolumeFormatError(f"unrecognized volume file {path} (expected .raw/.json or .nii)")


def save_volume(vol: VoxelVolume, path) -> list[Path]:
    """Write ``vol`` as f32 raw + sidecar (``.raw``/``.json``) or NIfTI-1 (``.nii``)."""
    path = Path(path)
    data = np.asarray(vol.intensities, dtype="<f4")
    if path.suffix == ".nii":
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
        struct.pack_into("<2h", hdr, 70, 16, 32)
        struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing_mm, 0, 0, 0, 0)
        struct.pack_into("<f", hdr, 108, 352.0)
        struct.pack_into("<f", hdr, 112, 1.0)
        struct.pack_into("<3f", hdr, 268, *vol.origin_mm)
        hdr[344:348] = b"n+1\x00"
        path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.transpose(2, 1, 0).tobytes())
        return [path]
    raw_path, meta_path = path.with_suffix(".raw"), path.with_suffix(".json")
    raw_path.write_bytes(data.transpose(2, 1, 0).tobytes())
    meta = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "dtype": "f32",
        "endianness": "little",
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return [raw_path, meta_path]


# ---------------------------------------------------------------------- phantom


def _value_noise(rng: np.random.Generator, pts: np.ndarray, cell_mm: float, extent_mm: float) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at world points ``pts`` (..., 3)."""
    n = int(math.ceil(2 * extent_mm / cell_mm)) + 3
    lattice = rng.random((n, n, n))
    u = pts / cell_mm + n / 2.0
    i0 = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    f = u - i0
    f = f * f * (3 - 2 * f)
    out = np.zeros(pts.shape[:-1])
    for c in range(8):
        dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        w = (
            (f[..., 0] if dx else 1 - f[..., 0])
            * (f[..., 1] if dy else 1 - f[..., 1])
            * (f[..., 2] if dz else 1 - f[..., 2])
        )
        out += w * lattice[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
    return out


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


class _Cortex:
    """Implicit brain-like body: a sphere with bumps and groove-shaped sulci."""

    radius_mm = 72.0
    bump_mm = 8.0
    sulcus_depth_mm = 5.0
    sulcus_width = 0.06

    def __init__(self, rng: np.random.Generator):
        self.bumps = rng.integers(2**31)
        self.sulci = rng.integers(2**31)
        self.texture = rng.integers(2**31)

    def _noise(self, key, pts, cell):
        return _value_noise(np.random.default_rng(key), pts, cell, PHANTOM_EXTENT_MM)

    def surface_radius(self, pts: np.ndarray) -> np.ndarray:
        """Local surface radius evaluated along the direction of each point."""
        r = np.linalg.norm(pts, axis=-1, keepdims=True)
        on_sphere = pts / np.maximum(r, 1e-9) * self.radius_mm
        bumps = self._noise(self.bumps, on_sphere, 40.0) - 0.5
        ridge = self._noise(self.sulci, on_sphere, 22.0) - 0.5
        groove = np.exp(-((ridge / self.sulcus_width) ** 2))
        return self.radius_mm + self.bump_mm * bumps - self.sulcus_depth_mm * groove

    def tissue(self, pts: np.ndarray) -> np.ndarray:
        return 0.36 + 0.22 * self._noise(self.texture, pts, 12.0)


def gen_phantom(seed: int, dims=(96, 96, 96)) -> VoxelVolume:
    """Deterministic head phantom: a cortex-like body with 2-4 surface vessels.

    The phantom spans a fixed 192 mm field of view, so ``dims`` only sets
    the sampling density. Tissue intensities lie in roughly [0.36, 0.58];
    vessels sit in two bands (0.80 and 0.95).
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 32:
        raise ValueError(f"phantom dims must be >= 32 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    spacing = tuple(PHANTOM_EXTENT_MM / n for n in dims)
    origin = tuple(-(n - 1) * s / 2 for n, s in zip(dims, spacing))
    axes = [o + np.arange(n) * s for o, n, s in zip(origin, dims, spacing)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    cortex = _Cortex(rng)
    r = np.linalg.norm(pts, axis=-1)
    edge = 1.5 * max(spacing)
    inside = cortex.surface_radius(pts) - r
    vol = cortex.tissue(pts) * _smoothstep(0.5 + inside / (2 * edge))

    bands = (0.80, 0.95)
    for v in range(int(rng.integers(2, 5))):
        tilt = rng.normal(size=3) * 0.25
        axis_u = np.array([0.0, 0.0, 1.0]) + tilt
        axis_u /= np.linalg.norm(axis_u)
        axis_v = np.cross(axis_u, rng.normal(size=3))
        axis_v /= np.linalg.norm(axis_v)
        normal = np.cross(axis_u, axis_v)
        t = np.linspace(-0.9, 0.9, 240) + rng.uniform(-0.3, 0.3)
        wiggle = 0.08 * np.sin(rng.uniform(3, 7) * t + rng.uniform(0, 2 * np.pi))
        dirs = np.cos(t)[:, None] * axis_u + np.sin(t)[:, None] * axis_v + wiggle[:, None] * normal
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        centerline = dirs * (cortex.surface_radius(dirs * cortex.radius_mm) - 1.0)[:, None]
        tube_r = rng.uniform(2.2, 3.5)
        near = np.abs(r - cortex.radius_mm) < cortex.radius_mm * 0.35
        dist, _ = cKDTree(centerline).query(pts[near], distance_upper_bound=tube_r + 2 * edge)
        vessel = bands[v % 2] * _smoothstep(0.5 + (tube_r - dist) / (2 * edge))
        vol[near] = np.maximum(vol[near], vessel)

    return VoxelVolume(np.clip(vol, 0.0, 1.0).astype(np.float32), spacing, origin)


def isolate_surface(vol: VoxelVolume, center_mm, radius_mm: float, threshold: float = 0.05) -> VoxelVolume:
    """Keep only voxels within ``radius_mm`` of ``center_mm`` and above ``threshold``.

    This is the region-of-interest crop used before rendering the training
    views: everything the renderer can see then lies in a known sphere.
    """
    if radius_mm <= 0:
        raise ValueError("crop radius must be positive")
    axes = [o + np.arange(n) * s for o, n, s in zip(vol.origin_mm, vol.dims, vol.spacing_mm)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    keep = np.linalg.norm(pts - np.asarray(center_mm, dtype=np.float64), axis=-1) <= radius_mm
    data = np.where(keep & (vol.intensities >= threshold), vol.intensities, 0.0)
    return VoxelVolume(data.astype(np.float32), vol.spacing_mm, vol.origin_mm)


def find_surface(vol: VoxelVolume, direction=(0.0, 0.0, 1.0), threshold: float = 0.2) -> np.ndarray:
    """First point above ``threshold`` when marching from outside towards the volume center."""
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    center = vol.center_mm()
    lo, hi = vol.bounds_mm()
    start = center + d * np.linalg.norm(hi - lo) / 2
    step = min(vol.spacing_mm) / 4
    n = int(np.linalg.norm(hi - lo) / 2 / step) + 1
    pts = start - d * (np.arange(n)[:, None] * step)
    vals = sample_trilinear_many(vol, pts)
    hit = np.nonzero(vals >= threshold)[0]
    if hit.size == 0:
        raise ValueError("no surface found along the given direction")
    return pts[hit[0]]


# -------------------------------------------------------------- sampling kernels


@nb.njit(cache=True)
def _trilinear(data, ux, uy, uz):
    nx, ny, nz = data.shape
    if ux <= -1.0 or uy <= -1.0 or uz <= -1.0 or ux >= nx or uy >= ny or uz >= nz:
        return 0.0
    i0 = int(math.floor(ux))
    j0 = int(math.floor(uy))
    k0 = int(math.floor(uz))
    fx = ux - i0
    fy = uy - j0
    fz = uz - k0
    acc = 0.0
    for c in range(8):
        i = i0 + ((c >> 2) & 1)
        j = j0 + ((c >> 1) & 1)
        k = k0 + (c & 1)
        if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
            continue
        w = (fx if (c >> 2) & 1 else 1.0 - fx) * (fy if (c >> 1) & 1 else 1.0 - fy) * (fz if c & 1 else 1.0 - fz)
        acc += w * data[i, j, k]
    return acc


@nb.njit(cache=True)
def _gradient(data, ux, uy, uz, sx, sy, sz):
    gx = (_trilinear(data, ux + 1.0, uy, uz) - _trilinear(data, ux - 1.0, uy, uz)) / (2.0 * sx)
    gy = (_trilinear(data, ux, uy + 1.0, uz) - _trilinear(data, ux, uy - 1.0, uz)) / (2.0 * sy)
    gz = (_trilinear(data, ux, uy, uz + 1.0) - _trilinear(data, ux, uy, uz - 1.0)) / (2.0 * sz)
    return gx, gy, gz


@nb.njit(cache=True)
def _sample_many(data, idx, out):
    for p in range(idx.shape[0]):
        out[p] = _trilinear(data, idx[p, 0], idx[p, 1], idx[p, 2])


@nb.njit(cache=True)
def _gradient_many(data, idx, spacing, out):
    for p in range(idx.shape[0]):
        g = _gradient(data, idx[p, 0], idx[p, 1], idx[p, 2], spacing[0], spacing[1], spacing[2])
        out[p, 0] = g[0]
        out[p, 1] = g[1]
        out[p, 2] = g[2]


def _to_index(vol: VoxelVolume, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return np.ascontiguousarray((pts - np.array(vol.origin_mm)) / np.array(vol.spacing_mm))


def sample_trilinear_many(vol: VoxelVolume, points_mm) -> np.ndarray:
    idx = _to_index(vol, points_mm)
    out = np.empty(idx.shape[0])
    _sample_many(vol.intensities, idx, out)
    return out


def sample_trilinear(vol: VoxelVolume, point_mm) -> float:
    """Trilinear interpolation of the 8 enclosing voxels (0 outside the lattice)."""
    return float(sample_trilinear_many(vol, point_mm)[0])


def gradient_at(vol: VoxelVolume, point_mm) -> np.ndarray:
    """Central-difference intensity gradient in 1/mm, step = voxel spacing."""
    idx = _to_index(vol, point_mm)
    out = np.empty((idx.shape[0], 3))
    _gradient_many(vol.intensities, idx, np.array(vol.spacing_mm), out)
    return out[0]


# ---------------------------------------------------------------------- render


@nb.njit(cache=True)
def _raycast(data, origin, spacing, lo, hi, ray_o, ray_d, step,
             tf_x, tf_rgb, tf_op, ambient, diffuse, background, out):
    n_rays = ray_o.shape[0]
    n_pts = tf_x.shape[0]
    for r in range(n_rays):
        ox, oy, oz = ray_o[r, 0], ray_o[r, 1], ray_o[r, 2]
        dx, dy, dz = ray_d[r, 0], ray_d[r, 1], ray_d[r, 2]
        t0 = 0.0
        t1 = 1e30
        o3 = (ox, oy, oz)
        d3 = (dx, dy, dz)
        for a in range(3):
            if abs(d3[a]) < 1e-12:
                if o3[a] < lo[a] or o3[a] > hi[a]:
                    t1 = -1.0
                continue
            ta = (lo[a] - o3[a]) / d3[a]
            tb = (hi[a] - o3[a]) / d3[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        cr = 0.0
        cg = 0.0
        cb = 0.0
        trans = 1.0
        if t1 > t0:
            k = 0
            while True:
                t = t0 + k * step
                if t > t1:
                    break
                k += 1
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                ux = (px - origin[0]) / spacing[0]
                uy = (py - origin[1]) / spacing[1]
                uz = (pz - origin[2]) / spacing[2]
                s = _trilinear(data, ux, uy, uz)
                # piecewise-linear transfer function
                if s <= tf_x[0]:
                    seg = 0
                    w = 0.0
                elif s >= tf_x[n_pts - 1]:
                    seg = n_pts - 2
                    w = 1.0
                else:
                    seg = 0
                    while tf_x[seg + 1] < s:
                        seg += 1
                    w = (s - tf_x[seg]) / (tf_x[seg + 1] - tf_x[seg])
                op = (1.0 - w) * tf_op[seg] + w * tf_op[seg + 1]
                if op <= 0.0:
                    continue
                alpha = 1.0 - math.exp(-op * step)
                gx, gy, gz = _gradient(data, ux, uy, uz, spacing[0], spacing[1], spacing[2])
                gn = math.sqrt(gx * gx + gy * gy + gz * gz)
                if gn > 1e-12:
                    lam = abs(gx * dx + gy * dy + gz * dz) / gn
                else:
                    lam = 1.0
                shade = min(1.0, ambient + diffuse * lam)
                wgt = trans * alpha * shade
                cr += wgt * ((1.0 - w) * tf_rgb[seg, 0] + w * tf_rgb[seg + 1, 0])
                cg += wgt * ((1.0 - w) * tf_rgb[seg, 1] + w * tf_rgb[seg + 1, 1])
                cb += wgt * ((1.0 - w) * tf_rgb[seg, 2] + w * tf_rgb[seg + 1, 2])
                trans *= 1.0 - alpha
                if trans < 1e-3:
                    break
        out[r, 0] = min(max(cr + trans * background[0], 0.0), 1.0)
        out[r, 1] = min(max(cg + trans * background[1], 0.0), 1.0)
        out[r, 2] = min(max(cb + trans * background[2], 0.0), 1.0)


def render_volume(
    vol: VoxelVolume,
    tf: TransferFunction,
    pose: CameraPose,
    intr: CameraIntrinsics,
    step_mm: float | None = None,
    background=(0.0, 0.0, 0.0),
) -> np.ndarray:
    """Front-to-back emission-absorption ray casting; returns an (H, W, 3) float image.

    Samples start where each ray enters the volume box and advance by
    ``step_mm`` (default: a quarter of the smallest voxel spacing). Shading is a
    Lambertian headlight term from the central-difference gradient.
    """
    if step_mm is None:
        step_mm = min(vol.spacing_mm) / 4
    if not 0 < step_mm <= min(vol.spacing_mm) + 1e-12:
        raise ValueError(f"step_mm must lie in (0, {min(vol.spacing_mm)}], got {step_mm}")
    o, d = pixel_rays(pose, intr)
    lo, hi = vol.bounds_mm()
    xs, rgb, op = tf.arrays()
    out = np.empty((intr.width * intr.height, 3))
    _raycast(
        vol.intensities, np.array(vol.origin_mm), np.array(vol.spacing_mm), lo, hi,
        np.ascontiguousarray(o.reshape(-1, 3)), np.ascontiguousarray(d.reshape(-1, 3)), float(step_mm),
        xs, np.ascontiguousarray(rgb), op, float(tf.ambient), float(tf.diffuse),
        np.asarray(background, dtype=np.float64), out,
    )
    return out.reshape(intr.height, intr.width, 3)
