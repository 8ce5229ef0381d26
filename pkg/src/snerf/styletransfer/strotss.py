"""Relaxed optimal-transport refinement of a stylized image.

The image is optimized directly: a per-pixel offset from the initial image
is parameterized coarse-to-fine and updated with Adam. Features are per-pixel
hypercolumns built from the Haar pyramid (rgb plus every level's bands).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .haar import check_divisible, pyramid_levels
from .wct import foreground, match_style_size

COS_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite style loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class StrotssConfig:
    iterations: int = 200  # per scale
    scales: int = 2
    content_weight: float = 1.0
    style_weight: float = 1.0
    palette_weight: float = 0.5
    feature_samples: int = 256
    step_size: float = 0.01
    seed: int = 0
    pyramid_levels: int = 3
    fg_threshold: float | None = 0.002

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.feature_samples < 2:
            raise ValueError("feature_samples must be >= 2")
        if min(self.content_weight, self.style_weight, self.palette_weight) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


def _as_tensor(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def cosine_distance_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a_i, b_j); norms are floored at COS_EPS."""
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    return 1.0 - (a @ b.T) / torch.clamp(na * nb.T, min=COS_EPS)


def euclidean_distance_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = (a * a).sum(1, keepdim=True) - 2 * a @ b.T + (b * b).sum(1)[None]
    return torch.sqrt(torch.clamp(sq, min=0.0) + 1e-12)


def relaxed_emd(a, b, metric: str = "cosine"):
    """max(mean_a min_b d, mean_b min_a d).

    With the cosine metric, vectors with norm below COS_EPS have no
    direction and are dropped from both sets. Accepts numpy arrays (returns
    a float) or tensors (returns a differentiable scalar).
    """
    as_float = not isinstance(a, torch.Tensor)
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if metric == "cosine":
        a = a[a.norm(dim=1) > COS_EPS]
        b = b[b.norm(dim=1) > COS_EPS]
        if len(a) == 0 or len(b) == 0:
            cost = a.sum() * 0.0 + b.sum() * 0.0
            return float(cost) if as_float else cost
        d = cosine_distance_matrix(a, b)
    elif metric == "euclidean":
        d = euclidean_distance_matrix(a, b)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    cost = torch.maximum(d.min(dim=1).values.mean(), d.min(dim=0).values.mean())
    return float(cost) if as_float else cost


def _row_normalized(d: torch.Tensor) -> torch.Tensor:
    return d / torch.clamp(d.sum(dim=1, keepdim=True), min=COS_EPS)


def self_similarity_loss(content_feats, output_feats):
    """Mean |D_c - D_o| of row-normalized pairwise cosine-distance matrices."""
    as_float = not isinstance(output_feats, torch.Tensor)
    c = _as_tensor(content_feats)
    o = _as_tensor(output_feats, c.dtype)
    if c.shape[0] != o.shape[0]:
        raise ValueError(f"sample count mismatch: {c.shape[0]} vs {o.shape[0]}")
    dc = _row_normalized(cosine_distance_matrix(c, c))
    do = _row_normalized(cosine_distance_matrix(o, o))
    loss = (dc - do).abs().mean()
    return float(loss) if as_float else loss


def moment_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ma, mb = a.mean(0), b.mean(0)
    ca = (a - ma).T @ (a - ma) / a.shape[0]
    cb = (b - mb).T @ (b - mb) / b.shape[0]
    return (ma - mb).abs().mean() + (ca - cb).abs().mean()


def feature_maps(img: torch.Tensor, levels: int) -> list:
    """The image followed by its Haar pyramid levels (finest first)."""
    return [img] + pyramid_levels(img, levels)


def gather(maps: list, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """(n, 3 + 12*levels) hypercolumns at the given full-resolution pixels."""
    return torch.cat([m[rows >> s, cols >> s] for s, m in enumerate(maps)], dim=1)


def hypercolumns(img: torch.Tensor, levels: int, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    return gather(feature_maps(img, levels), rows, cols)


def _loss(fo: torch.Tensor, fc: torch.Tensor, fs: torch.Tensor, cfg: "StrotssConfig") -> torch.Tensor:
    loss = fo.new_zeros(())
    if cfg.content_weight:
        loss = loss + cfg.content_weight * self_similarity_loss(fc, fo)
    if cfg.style_weight:
        loss = loss + cfg.style_weight * relaxed_emd(fo, fs)
    if cfg.palette_weight:
        palette = moment_loss(fo, fs) + relaxed_emd(fo[:, :3], fs[:, :3], metric="euclidean")
        loss = loss + cfg.palette_weight * palette
    return loss


def strotss_objective(
    output: torch.Tensor,
    content: torch.Tensor,
    style: torch.Tensor,
    positions: tuple,
    cfg: StrotssConfig,
    style_positions: tuple | None = None,
) -> torch.Tensor:
    """Weighted STROTSS loss evaluated at sampled pixel positions."""
    rows, cols = positions
    srows, scols = positions if style_positions is None else style_positions
    fo = hypercolumns(output, cfg.pyramid_levels, rows, cols)
    with torch.no_grad():
        fc = hypercolumns(content, cfg.pyramid_levels, rows, cols)
        fs = hypercolumns(style, cfg.pyramid_levels, srows, scols)
    return _loss(fo, fc, fs, cfg)


class _PositionSampler:
    """Draws pixel positions from a mask with its own seeded stream.

    Two samplers built from the same seed and identical masks return
    identical positions, which is what makes the objective vanish when the
    style image equals the initialization.
    """

    def __init__(self, mask: np.ndarray, seed: int):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            idx = np.arange(mask.size)
        self.width = mask.shape[1]
        self.idx = torch.as_tensor(idx)
        self.gen = torch.Generator().manual_seed(seed)

    def draw(self, n: int):
        n = min(n, len(self.idx))
        pick = self.idx[torch.randperm(len(self.idx), generator=self.gen)[:n]]
        return pick // self.width, pick % self.width


def _upsample(delta: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if delta.shape[-2:] == (h, w):
        return delta
    return F.interpolate(delta, size=(h, w), mode="bilinear", align_corners=False)


def strotss_refine(
    init: np.ndarray,
    style: np.ndarray,
    cfg: StrotssConfig = StrotssConfig(),
    style_mask=None,
    return_history: bool = False,
):
    """Coarse-to-fine optimization of the image starting from ``init``.

    The offset from ``init`` is a Laplacian-style stack of grids: scale k
    adds a grid at 1/2^(scales-1-k) resolution while the coarser grids stay
    trainable. Each iteration takes an Adam step on a fresh random subset
    of positions. The step is kept only if the loss on a fixed monitoring
    subset does not increase; otherwise it is discarded and the step size
    halved (it recovers on later accepted steps). The recorded history is
    therefore non-increasing. Background pixels (see ``fg_threshold``) are
    never modified.
    """
    init = np.asarray(init, dtype=np.float64)
    check_divisible(init.shape, cfg.pyramid_levels)
    style = match_style_size(style, init)
    h, w, _ = init.shape
    cmask = foreground(init, cfg.fg_threshold)
    smask = foreground(style, cfg.fg_threshold)
    if style_mask is not None:
        smask &= np.asarray(style_mask, dtype=bool)

    dtype = torch.float32
    x0 = torch.as_tensor(init, dtype=dtype)
    fg = torch.as_tensor(cmask, dtype=dtype)[None, None]
    cmaps = feature_maps(x0, cfg.pyramid_levels)
    smaps = feature_maps(torch.as_tensor(style, dtype=dtype), cfg.pyramid_levels)

    content_draw = _PositionSampler(cmask, cfg.seed)
    style_draw = _PositionSampler(smask, cfg.seed)
    monitor_c = content_draw.draw(cfg.feature_samples)
    monitor_s = style_draw.draw(cfg.feature_samples)
    monitor_fc = gather(cmaps, *monitor_c)
    monitor_fs = gather(smaps, *monitor_s)

    def image_from(grids):
        delta = sum(_upsample(g, h, w) for g in grids)
        return x0 + (delta * fg)[0].permute(1, 2, 0)

    def monitored(grids):
        with torch.no_grad():
            fo = gather(feature_maps(image_from(grids), cfg.pyramid_levels), *monitor_c)
            return float(_loss(fo, monitor_fc, monitor_fs, cfg))

    grids: list = []
    best = float("nan")
    history: list = []
    iteration = 0
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    for scale in range(cfg.scales):
        shift = cfg.scales - 1 - scale
        grids.append(torch.zeros(1, 3, max(1, h >> shift), max(1, w >> shift), dtype=dtype))
        if not history:
            best = monitored(grids)
            history.append(best)
        m = [torch.zeros_like(g) for g in grids]
        v = [torch.zeros_like(g) for g in grids]
        lr_scale = 1.0
        for t in range(1, cfg.iterations + 1):
            params = [g.detach().requires_grad_(True) for g in grids]
            rows, cols = content_draw.draw(cfg.feature_samples)
            fo = gather(feature_maps(image_from(params), cfg.pyramid_levels), rows, cols)
            fs = gather(smaps, *style_draw.draw(cfg.feature_samples))
            loss = _loss(fo, gather(cmaps, rows, cols), fs, cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(iteration, float(loss.detach()))
            grads = torch.autograd.grad(loss, params)
            candidate = []
            for g, gm, gv, gr in zip(grids, m, v, grads):
                gm.mul_(b1).add_(gr, alpha=1 - b1)
                gv.mul_(b2).addcmul_(gr, gr, value=1 - b2)
                step = (gm / (1 - b1**t)) / ((gv / (1 - b2**t)).sqrt() + adam_eps)
                candidate.append(g - cfg.step_size * lr_scale * step)
            value = monitored(candidate)
            if value <= best:
                grids, best = candidate, value
                lr_scale = min(1.0, lr_scale * 2.0)
            else:
                lr_scale *= 0.5
            history.append(best)
            iteration += 1
    out = np.clip(image_from(grids).numpy().astype(np.float64), 0.0, 1.0)
    out = np.where(cmask[..., None], out, init)
    return (out, history) if return_history else out
