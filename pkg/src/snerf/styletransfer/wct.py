"""Whitening/coloring transforms on the Haar feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..images import center_crop_resize
from .haar import FeaturePyramid, block_any, check_divisible, haar_decompose, haar_reconstruct


@dataclass(frozen=True)
class LevelStats:
    mean: np.ndarray  # (C,)
    cov: np.ndarray  # (C, C)


@dataclass(frozen=True)
class StyleStats:
    levels: tuple  # LevelStats per pyramid level, finest first


@dataclass(frozen=True)
class WctConfig:
    levels: int = 3
    blend_alpha: tuple = (0.8, 0.8, 0.8)
    eps: float = 1e-5
    # pixels whose max channel is <= this are background and keep their
    # content value; None transfers every pixel
    fg_threshold: float | None = 0.002

    def __post_init__(self):
        alphas = self.blend_alpha
        if isinstance(alphas, (int, float)):
            alphas = (float(alphas),) * self.levels
        object.__setattr__(self, "blend_alpha", tuple(float(a) for a in alphas))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.blend_alpha) != self.levels:
            raise ValueError(f"blend_alpha needs {self.levels} entries, got {len(self.blend_alpha)}")
        if not all(0.0 <= a <= 1.0 for a in self.blend_alpha):
            raise ValueError("blend_alpha values must lie in [0, 1]")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


def _flat(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    return f.reshape(-1, f.shape[-1])


def _moments(f: np.ndarray) -> LevelStats:
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / f.shape[0]
    return LevelStats(mean, (cov + cov.T) / 2)


def level_stats(features: np.ndarray) -> LevelStats:
    """Sample mean and population covariance over spatial positions."""
    f = _flat(features)
    n, c = f.shape
    if n < c + 1:
        raise ValueError(f"need at least {c + 1} samples for {c} channels, got {n}")
    return _moments(f)


def compute_style_stats(pyr: FeaturePyramid) -> StyleStats:
    return StyleStats(tuple(level_stats(f) for f in pyr.levels))


def _eig(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(cov)
    return vals, vecs


def whiten(features: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Zero-mean, identity-covariance features; eigenvalues are floored at ``eps``."""
    f = _flat(features)
    st = _moments(f)
    vals, vecs = _eig(st.cov)
    w = vecs @ np.diag(np.maximum(vals, eps) ** -0.5) @ vecs.T
    return ((f - st.mean) @ w).reshape(np.shape(features))


def color(features: np.ndarray, stats: LevelStats, eps: float = 1e-5) -> np.ndarray:
    """Map white features to the target mean/covariance."""
    vals, vecs = _eig(stats.cov)
    if vals.min() < -1e-8:
        raise ValueError(f"target covariance is not PSD (min eigenvalue {vals.min():.3g})")
    c = vecs @ np.diag(np.maximum(vals, eps) ** 0.5) @ vecs.T
    f = _flat(features)
    return (f @ c + stats.mean).reshape(np.shape(features))


def foreground(img: np.ndarray, threshold: float | None) -> np.ndarray:
    if threshold is None:
        return np.ones(img.shape[:2], dtype=bool)
    return img.max(axis=-1) > threshold


def match_style_size(style: np.ndarray, content: np.ndarray) -> np.ndarray:
    h, w = content.shape[:2]
    if style.shape[:2] == (h, w):
        return np.asarray(style, dtype=np.float64)
    return center_crop_resize(style, w, h)


def wct_stage(content: np.ndarray, style: np.ndarray, cfg: WctConfig = WctConfig(), style_mask=None) -> np.ndarray:
    """Closed-form wavelet-domain whitening/coloring transfer.

    Every pyramid level is whitened with the content statistics, colored
    with the style statistics and blended back with the content features
    by ``blend_alpha``. Foreground and background are separate labels:
    statistics come from foreground positions only and background pixels
    are returned untouched. ``style_mask`` further restricts which style
    pixels contribute statistics (e.g. a circular field-of-view mask).
    """
    content = np.asarray(content, dtype=np.float64)
    check_divisible(content.shape, cfg.levels)
    style = match_style_size(style, content)
    cmask = foreground(content, cfg.fg_threshold)
    smask = foreground(style, cfg.fg_threshold)
    if style_mask is not None:
        smask &= np.asarray(style_mask, dtype=bool)
    pc = haar_decompose(content, cfg.levels)
    ps = haar_decompose(style, cfg.levels)
    out_levels = []
    for i, alpha in enumerate(cfg.blend_alpha):
        fc, fs = pc.levels[i], ps.levels[i]
        mc = block_any(cmask, 2 ** (i + 1))
        ms = block_any(smask, 2 ** (i + 1))
        n_ch = fc.shape[-1]
        out = fc.copy()
        if alpha > 0 and mc.sum() > n_ch and ms.sum() > n_ch:
            target = level_stats(fs[ms])
            moved = color(whiten(fc[mc], cfg.eps), target, cfg.eps)
            out[mc] = alpha * moved + (1 - alpha) * fc[mc]
        out_levels.append(out)
    img = haar_reconstruct(FeaturePyramid(out_levels, pc.channels))
    img = np.where(cmask[..., None], img, content)
    return np.clip(img, 0.0, 1.0)
