"""Radiance field: hash-grid encoding, density MLP and view-dependent color MLP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .encoding import HashGridConfig, HashGridEncoding

SIGMA_CLAMP = 15.0
SH_COEFFS = 16


def sh_encode(d: torch.Tensor) -> torch.Tensor:
    """Real spherical-harmonics basis of bands 0..3 (16 values) for unit directions."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    return torch.stack([
        torch.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * xy,
        -1.0925484305920792 * yz,
        0.94617469575755997 * zz - 0.31539156525251999,
        -1.0925484305920792 * xz,
        0.54627421529603959 * (xx - yy),
        0.59004358992664352 * y * (-3.0 * xx + yy),
        2.8906114426405538 * xy * z,
        0.45704579946446572 * y * (1.0 - 5.0 * zz),
        0.3731763325901154 * z * (5.0 * zz - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * zz),
        1.4453057213202769 * z * (xx - yy),
        0.59004358992664352 * x * (-xx + 3.0 * yy),
    ], dim=1)


@dataclass(frozen=True)
class ModelConfig:
    encoding: HashGridConfig = field(default_factory=HashGridConfig)
    hidden: int = 64
    geo_features: int = 15
    color_layers: int = 2
    # scene box in world millimetres, mapped isotropically onto [0, 1]^3
    aabb_mm: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        lo, hi = np.asarray(self.aabb_mm[0], float), np.asarray(self.aabb_mm[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError(f"invalid scene box {self.aabb_mm}")
        object.__setattr__(self, "aabb_mm", (tuple(map(float, lo)), tuple(map(float, hi))))
        if self.hidden < 1 or self.geo_features < 0 or self.color_layers < 1:
            raise ValueError("network sizes must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["aabb_mm"] = [list(self.aabb_mm[0]), list(self.aabb_mm[1])]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["encoding"] = HashGridConfig(**obj["encoding"])
        obj["aabb_mm"] = tuple(tuple(v) for v in obj["aabb_mm"])
        return cls(**obj)


def _linear(n_in: int, n_out: int, gen: torch.Generator, dtype) -> torch.nn.Linear:
    layer = torch.nn.Linear(n_in, n_out, dtype=dtype)
    bound = (6.0 / n_in) ** 0.5 / 2
    with torch.no_grad():
        layer.weight.copy_((torch.rand(n_out, n_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        layer.bias.zero_()
    return layer


class RadianceFieldModel(torch.nn.Module):
    """F(x, d) = (sigma(x), c(x, d)); positions in normalized [0, 1]^3 scene units."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed + 1)
        self.encoding = HashGridEncoding(cfg.encoding, seed=seed, dtype=dtype)
        self.density_net = torch.nn.Sequential(
            _linear(cfg.encoding.output_dim, cfg.hidden, gen, dtype),
            torch.nn.ReLU(),
            _linear(cfg.hidden, 1 + cfg.geo_features, gen, dtype),
        )
        layers: list = []
        n_in = cfg.geo_features + SH_COEFFS
        for _ in range(cfg.color_layers):
            layers += [_linear(n_in, cfg.hidden, gen, dtype), torch.nn.ReLU()]
            n_in = cfg.hidden
        layers.append(_linear(n_in, 3, gen, dtype))
        self.color_net = torch.nn.Sequential(*layers)
        lo, hi = (np.asarray(v, dtype=np.float64) for v in cfg.aabb_mm)
        self.scale_mm = float(np.max(hi - lo))
        self.origin_mm = (lo + hi) / 2 - self.scale_mm / 2

    @property
    def dtype(self):
        return self.encoding.tables.dtype

    def to_unit(self, points_mm: np.ndarray) -> np.ndarray:
        return (np.asarray(points_mm, dtype=np.float64) - self.origin_mm) / self.scale_mm

    def density(self, x: torch.Tensor) -> tuple:
        h = self.density_net(self.encoding(x))
        sigma = torch.exp(torch.clamp(h[:, 0], max=SIGMA_CLAMP))
        return sigma, h[:, 1:]

    def forward(self, x: torch.Tensor, d: torch.Tensor) -> tuple:
        """(n, 3) unit-cube positions and unit directions -> (sigma (n,), rgb (n, 3))."""
        sigma, geo = self.density(x)
        rgb = torch.sigmoid(self.color_net(torch.cat([geo, sh_encode(d).to(geo.dtype)], dim=1)))
        return sigma, rgb


def field_eval(model: RadianceFieldModel, x, d) -> tuple:
    """Evaluate density and color at normalized points ``x`` along unit directions ``d``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-6):
        raise ValueError("directions must be unit length")
    d = np.array(np.broadcast_to(d, x.shape))
    with torch.no_grad():
        sigma, rgb = model(torch.as_tensor(x, dtype=model.dtype), torch.as_tensor(d, dtype=model.dtype))
    return sigma.numpy().astype(np.float64), rgb.numpy().astype(np.float64)
