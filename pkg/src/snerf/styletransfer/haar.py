"""Orthonormal 2-D Haar analysis/synthesis and the multiscale feature pyramid.

The band helpers only use slicing and arithmetic, so they work on numpy
arrays and torch tensors alike (layout ``(H, W, C)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def haar_split(x):
    """One analysis step: returns ``(ll, lh, hl, hh)`` at half resolution."""
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    return (a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2


def haar_merge(ll, lh, hl, hh):
    """Inverse of `haar_split`."""
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w, ch = a.shape
    if isinstance(a, np.ndarray):
        top = np.stack([a, b], axis=2).reshape(h, 2 * w, ch)
        bot = np.stack([c, d], axis=2).reshape(h, 2 * w, ch)
        return np.stack([top, bot], axis=1).reshape(2 * h, 2 * w, ch)
    import torch

    top = torch.stack([a, b], dim=2).reshape(h, 2 * w, ch)
    bot = torch.stack([c, d], dim=2).reshape(h, 2 * w, ch)
    return torch.stack([top, bot], dim=1).reshape(2 * h, 2 * w, ch)


def _cat(parts):
    if isinstance(parts[0], np.ndarray):
        return np.concatenate(parts, axis=-1)
    import torch

    return torch.cat(parts, dim=-1)


def check_divisible(shape, levels: int) -> None:
    h, w = shape[:2]
    k = 2**levels
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    if h % k or w % k:
        raise ValueError(f"image size {w}x{h} is not divisible by 2^{levels}={k}")


def pyramid_levels(img, levels: int) -> list:
    """Per-level feature maps ``[LH, HL, HH, rgb]``; level i has scale 2^(i+1).

    ``rgb`` is the block mean (the Haar approximation divided by 2^(i+1)),
    i.e. the image downsampled to that level.
    """
    check_divisible(img.shape, levels)
    out = []
    cur = img
    for i in range(levels):
        ll, lh, hl, hh = haar_split(cur)
        out.append(_cat([lh, hl, hh, ll / 2 ** (i + 1)]))
        cur = ll
    return out


@dataclass
class FeaturePyramid:
    levels: list  # finest first, each (h, w, 4C): [LH, HL, HH, rgb]
    channels: int  # C, the image channel count

    def details(self, level: int):
        c = self.channels
        f = self.levels[level]
        return f[..., :c], f[..., c:2 * c], f[..., 2 * c:3 * c]

    def rgb(self, level: int):
        return self.levels[level][..., 3 * self.channels:]

    def approximation(self, level: int):
        """Orthonormal LL coefficients at this level."""
        return self.rgb(level) * 2 ** (level + 1)


def haar_decompose(img: np.ndarray, levels: int) -> FeaturePyramid:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return FeaturePyramid(pyramid_levels(img, levels), img.shape[-1])


def haar_reconstruct(pyr: FeaturePyramid) -> np.ndarray:
    """Synthesis from the coarsest approximation and every level's details.

    The ``rgb`` channels of finer levels are redundant with the coarser
    bands and are not read.
    """
    top = len(pyr.levels) - 1
    cur = pyr.approximation(top)
    for level in range(top, -1, -1):
        cur = haar_merge(cur, *pyr.details(level))
    return cur


def block_any(mask: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a boolean (H, W) mask: a block is set if any pixel in it is."""
    h, w = mask.shape
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))
