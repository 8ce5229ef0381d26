"""Unpaired appearance transfer from one target image onto a posed dataset.

Two stages: a closed-form wavelet whitening/coloring transfer for
structure-preserving recoloring, then a relaxed optimal-transport refinement
that pulls feature and color distributions towards the target.
"""

from __future__ import annotations

import numpy as np

from ..posegen import PosedDataset
from .haar import FeaturePyramid, haar_decompose, haar_reconstruct
from .strotss import (
    NonFiniteLossError,
    StrotssConfig,
    relaxed_emd,
    self_similarity_loss,
    strotss_objective,
    strotss_refine,
)
from .wct import LevelStats, StyleStats, WctConfig, color, compute_style_stats, wct_stage, whiten

MODES = ("wct", "strotss", "hybrid")

__all__ = [
    "MODES", "FeaturePyramid", "LevelStats", "NonFiniteLossError", "StrotssConfig", "StyleStats",
    "WctConfig", "circular_mask", "color", "compute_style_stats", "haar_decompose", "haar_reconstruct",
    "relaxed_emd", "self_similarity_loss", "strotss_objective", "strotss_refine", "stylize",
    "stylize_dataset", "wct_stage", "whiten",
]


def circular_mask(height: int, width: int, radius_frac: float = 0.5) -> np.ndarray:
    """Centered disc covering ``radius_frac`` of the shorter image side."""
    yy, xx = np.mgrid[:height, :width]
    r = np.hypot(yy + 0.5 - height / 2, xx + 0.5 - width / 2)
    return r <= radius_frac * min(height, width)


def stylize(
    content: np.ndarray,
    style: np.ndarray,
    mode: str = "hybrid",
    wct_cfg: WctConfig = WctConfig(),
    strotss_cfg: StrotssConfig = StrotssConfig(),
    style_mask=None,
) -> np.ndarray:
    if mode == "wct":
        return wct_stage(content, style, wct_cfg, style_mask)
    if mode == "strotss":
        return strotss_refine(content, style, strotss_cfg, style_mask)
    if mode == "hybrid":
        return strotss_refine(wct_stage(content, style, wct_cfg, style_mask), style, strotss_cfg, style_mask)
    raise ValueError(f"unknown style mode {mode!r}; expected one of {MODES}")


def stylize_dataset(
    ds: PosedDataset,
    style: np.ndarray,
    mode: str = "hybrid",
    wct_cfg: WctConfig = WctConfig(),
    strotss_cfg: StrotssConfig = StrotssConfig(),
    style_mask=None,
    progress=None,
) -> PosedDataset:
    """Stylize every frame; poses and their order are kept as-is.

    Every frame uses the same refinement seed, so equal inputs give equal
    outputs regardless of their position in the dataset.
    """
    images = []
    for i, img in enumerate(ds.images):
        images.append(stylize(img, style, mode, wct_cfg, strotss_cfg, style_mask))
        if progress is not None:
            progress(i + 1, len(ds))
    return ds.with_images(images, "stylized")
