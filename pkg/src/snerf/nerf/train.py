"""Photometric training of the radiance field on a posed dataset."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ..posegen import PosedDataset
from .model import RadianceFieldModel
from .render import RenderConfig, camera_rays_unit, composite, stratified_t, unit_box_interval

TRAINABLE_PROVENANCES = ("stylized", "captured")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite training loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    rays_per_batch: int = 512
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-15
    # "cosine" decays to final_lr_frac of the initial rate; "constant" keeps it
    lr_decay: str = "cosine"
    final_lr_frac: float = 0.1
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if not (self.lr_tables > 0 and self.lr_mlp > 0):
            raise ValueError("learning rates must be > 0")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in [0, 1)")
        if self.lr_decay not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ValueError("final_lr_frac must lie in (0, 1]")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def lr_factor(self, it: int) -> float:
        if self.lr_decay == "constant" or self.iterations == 1:
            return 1.0
        c = 0.5 * (1.0 + math.cos(math.pi * it / (self.iterations - 1)))
        return self.final_lr_frac + (1.0 - self.final_lr_frac) * c


@dataclass
class TrainResult:
    model: RadianceFieldModel
    loss_history: list = field(default_factory=list)
    seconds: float = 0.0
    rays_total: int = 0
    rays_used: int = 0


@dataclass
class RayBank:
    """Every dataset pixel ray that meets the scene cube, in normalized units."""

    origins: torch.Tensor
    dirs: torch.Tensor
    t0: torch.Tensor
    t1: torch.Tensor
    target: torch.Tensor
    total: int

    @classmethod
    def build(cls, model: RadianceFieldModel, ds: PosedDataset, cfg: RenderConfig) -> "RayBank":
        o_all, d_all, c_all = [], [], []
        for pose, img in ds.frames:
            o, d = camera_rays_unit(model, pose, ds.intrinsics)
            o_all.append(o)
            d_all.append(d)
            c_all.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        o, d, c = np.concatenate(o_all), np.concatenate(d_all), np.concatenate(c_all)
        t0, t1 = unit_box_interval(o, d, cfg.near, cfg.far)
        # a ray that misses the cube composites pure background whatever the
        # parameters are, so it carries no gradient and is dropped
        hit = t0 < t1
        dt = model.dtype
        return cls(
            torch.as_tensor(o[hit], dtype=dt), torch.as_tensor(d[hit], dtype=dt),
            torch.as_tensor(t0[hit], dtype=dt), torch.as_tensor(t1[hit], dtype=dt),
            torch.as_tensor(c[hit], dtype=dt), len(o),
        )

    def __len__(self) -> int:
        return len(self.origins)


def batch_loss(model: RadianceFieldModel, bank: RayBank, idx: torch.Tensor, cfg: RenderConfig, u=None) -> torch.Tensor:
    """Mean squared color error of the rays ``idx`` (the Monte-Carlo photometric loss)."""
    n = cfg.n_samples
    o, d = bank.origins[idx], bank.dirs[idx]
    t, delta = stratified_t(bank.t0[idx], bank.t1[idx], n, u)
    pts = (o[:, None] + t[..., None] * d[:, None]).reshape(-1, 3).clamp(0.0, 1.0)
    sigma, rgb = model(pts, d[:, None].expand(-1, n, -1).reshape(-1, 3))
    bg = torch.tensor(cfg.background, dtype=model.dtype)
    color, _, _ = composite(sigma.reshape(-1, n), rgb.reshape(-1, n, 3), delta, bg)
    return ((color - bank.target[idx]) ** 2).mean()


@contextlib.contextmanager
def _deterministic(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def train(
    model: RadianceFieldModel,
    ds: PosedDataset,
    tcfg: TrainConfig = TrainConfig(),
    rcfg: RenderConfig = RenderConfig(jitter=True),
    progress=None,
) -> TrainResult:
    """Fit ``model`` in place to the dataset colors with Adam on random ray batches."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.provenance not in TRAINABLE_PROVENANCES:
        raise ValueError(f"dataset provenance {ds.provenance!r} is not trainable")
    start = time.perf_counter()
    bank = RayBank.build(model, ds, rcfg)
    if len(bank) == 0:
        raise ValueError("no dataset ray intersects the scene box")
    gen = torch.Generator().manual_seed(tcfg.seed)
    mlp_params = list(model.density_net.parameters()) + list(model.color_net.parameters())
    opt = torch.optim.Adam(
        [{"params": [model.encoding.tables], "lr": tcfg.lr_tables}, {"params": mlp_params, "lr": tcfg.lr_mlp}],
        betas=tcfg.betas, eps=tcfg.adam_eps, fused=True,
    )
    base_lrs = [g["lr"] for g in opt.param_groups]
    history = []
    with _deterministic(tcfg.deterministic):
        for it in range(tcfg.iterations):
            for g, lr in zip(opt.param_groups, base_lrs):
                g["lr"] = lr * tcfg.lr_factor(it)
            idx = torch.randint(len(bank), (tcfg.rays_per_batch,), generator=gen)
            u = torch.rand(tcfg.rays_per_batch, rcfg.n_samples, generator=gen, dtype=model.dtype) if rcfg.jitter else None
            loss = batch_loss(model, bank, idx, rcfg, u)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(it, value)
            history.append(value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if progress is not None:
                progress(it + 1, tcfg.iterations, value)
    return TrainResult(model, history, time.perf_counter() - start, bank.total, len(bank))
