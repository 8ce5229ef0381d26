"""Stratified ray sampling and emission-absorption compositing for the radiance field."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..camera import CameraIntrinsics, CameraPose, pixel_rays


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 96
    # normalized scene units along the ray, further clipped to the unit cube
    near: float = 0.0
    far: float = math.inf
    background: tuple = (0.0, 0.0, 0.0)
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.near < self.far:
            raise ValueError(f"need 0 <= near < far, got near={self.near} far={self.far}")
        if len(self.background) != 3:
            raise ValueError("background must be an rgb triple")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))


def unit_box_interval(origins: np.ndarray, dirs: np.ndarray, near: float, far: float):
    """Per-ray [t0, t1] inside both the unit cube and [near, far]; t0 >= t1 marks a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (0.0 - origins) * inv
        tb = (1.0 - origins) * inv
    lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    hi = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb))
    t0 = np.maximum(lo.max(axis=1), near)
    t1 = np.minimum(hi.min(axis=1), far)
    return t0, t1


def stratified_t(t0: torch.Tensor, t1: torch.Tensor, n: int, u: torch.Tensor | None) -> tuple:
    """Sample depths (rays, n) and their spacings.

    Without jitter samples sit at bin midpoints. Spacing is t_{i+1} - t_i,
    and the last sample gets one bin width.
    """
    width = (t1 - t0)[:, None] / n
    offset = 0.5 if u is None else u
    idx = torch.arange(n, dtype=t0.dtype)[None]
    t = t0[:, None] + (idx + offset) * width
    delta = torch.cat([t[:, 1:] - t[:, :-1], width], dim=1)
    return t, delta


def composite(sigma: torch.Tensor, rgb: torch.Tensor, delta: torch.Tensor, background: torch.Tensor) -> tuple:
    """(rays, n) densities and spacings, (rays, n, 3) colors -> color, weights, final transmittance."""
    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha], dim=1), dim=1)
    weights = trans[:, :-1] * alpha
    t_final = trans[:, -1]
    color = (weights[..., None] * rgb).sum(dim=1) + t_final[:, None] * background
    return color, weights, t_final


def render_rays(model, origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig, u=None, out_dtype=torch.float64):
    """Render rays given in normalized scene units; returns torch (color, weights, t_final).

    Network outputs are promoted to ``out_dtype`` before compositing, so the
    compositing identity holds to float64 rounding for the public renderers.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays, n = len(origins), cfg.n_samples
    in_dtype = getattr(model, "dtype", torch.float64)
    bg = torch.tensor(cfg.background, dtype=out_dtype)
    t0, t1 = unit_box_interval(origins, dirs, cfg.near, cfg.far)
    hit = t0 < t1
    color = bg.expand(n_rays, 3).clone()
    weights = torch.zeros(n_rays, n, dtype=out_dtype)
    t_final = torch.ones(n_rays, dtype=out_dtype)
    if hit.any():
        uh = None if u is None else torch.as_tensor(np.asarray(u)[hit], dtype=torch.float64)
        t, delta = stratified_t(torch.as_tensor(t0[hit]), torch.as_tensor(t1[hit]), n, uh)
        pts = torch.as_tensor(origins[hit])[:, None] + t[..., None] * torch.as_tensor(dirs[hit])[:, None]
        d = torch.as_tensor(dirs[hit])[:, None].expand(-1, n, -1)
        sigma, rgb = model(pts.reshape(-1, 3).clamp(0.0, 1.0).to(in_dtype), d.reshape(-1, 3).to(in_dtype))
        c, w, tf = composite(
            sigma.reshape(-1, n).to(out_dtype), rgb.reshape(-1, n, 3).to(out_dtype), delta.to(out_dtype), bg
        )
        hit_t = torch.as_tensor(hit)
        color[hit_t], weights[hit_t], t_final[hit_t] = c, w, tf
    return color, weights, t_final


def render_ray(model, origin, direction, cfg: RenderConfig = RenderConfig()):
    """Single ray in normalized scene units -> (rgb, weights, final transmittance).

    ``model`` is any callable mapping (n, 3) positions and directions to
    (sigma, rgb) tensors.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    u = None
    if cfg.jitter:
        u = np.random.default_rng(cfg.seed).random((1, cfg.n_samples))
    with torch.no_grad():
        c, w, tf = render_rays(model, np.asarray(origin, dtype=np.float64)[None], d[None], cfg, u)
    return c[0].numpy(), w[0].numpy(), float(tf[0])


def camera_rays_unit(model, pose: CameraPose, intr: CameraIntrinsics) -> tuple:
    """Pixel rays of a camera mapped into the model's normalized scene frame."""
    o, d = pixel_rays(pose, intr)
    return model.to_unit(o.reshape(-1, 3)), d.reshape(-1, 3)


def render_view(model, pose: CameraPose, intr: CameraIntrinsics, cfg: RenderConfig = RenderConfig(), chunk: int = 4096) -> np.ndarray:
    """(H, W, 3) float64 image; jitter, when on, is drawn per pixel from ``cfg.seed``."""
    origins, dirs = camera_rays_unit(model, pose, intr)
    u = np.random.default_rng(cfg.seed).random((len(origins), cfg.n_samples)) if cfg.jitter else None
    out = np.empty((len(origins), 3))
    with torch.no_grad():
        for s in range(0, len(origins), chunk):
            us = None if u is None else u[s:s + chunk]
            out[s:s + chunk] = render_rays(model, origins[s:s + chunk], dirs[s:s + chunk], cfg, us)[0].numpy()
    return np.clip(out.reshape(intr.height, intr.width, 3), 0.0, 1.0)
