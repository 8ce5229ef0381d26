"""Multiresolution hash-grid encoding with numba kernels and a torch autograd bridge."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
import torch

PRIMES = (1, 2654435761, 805459861)
_MASK32 = np.uint64(0xFFFFFFFF)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 12
    log2_table_size: int = 18
    features: int = 2
    n_min: int = 16
    n_max: int = 1024

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features < 1:
            raise ValueError("features must be >= 1")
        if not 1 <= self.log2_table_size <= 30:
            raise ValueError("log2_table_size must lie in [1, 30]")
        if self.n_min < 2:
            raise ValueError("n_min must be >= 2")
        if self.levels > 1 and self.n_max <= self.n_min:
            raise ValueError("n_max must exceed n_min when levels > 1")
        res = self.resolutions()
        if np.any(np.diff(res) <= 0):
            raise ValueError(f"level resolutions are not strictly increasing: {res.tolist()}")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> np.ndarray:
        """N_l = floor(n_min * b^l) with b chosen so the last level is n_max."""
        if self.levels == 1:
            return np.array([self.n_min], dtype=np.int64)
        b = math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))
        res = [int(math.floor(self.n_min * b**lvl + 1e-9)) for lvl in range(self.levels)]
        return np.array(res, dtype=np.int64)

    def dense_levels(self) -> np.ndarray:
        """True where the (N+1)^3 vertex lattice fits the table and is indexed directly."""
        return (self.resolutions() + 1) ** 3 <= self.table_size

    def to_json(self) -> dict:
        return asdict(self)


@numba.njit(cache=True, inline="always")
def _slot(i, j, k, n, dense, tmask):
    if dense:
        return i + j * (n + 1) + k * (n + 1) * (n + 1)
    h = np.uint64(i) ^ ((np.uint64(j) * np.uint64(2654435761)) & _MASK32) ^ (
        (np.uint64(k) * np.uint64(805459861)) & _MASK32
    )
    return np.int64(h & np.uint64(tmask))


@numba.njit(cache=True, inline="always")
def _cell(x, n):
    p = min(max(x, 0.0), 1.0) * n
    i = min(int(math.floor(p)), n - 1)
    return i, p - i


@numba.njit(cache=True, inline="always")
def _corners(x, y, z, n, dense, tmask, slots, weights):
    """Fill the 8 corner table slots and trilinear weights of one point."""
    i, fx = _cell(x, n)
    j, fy = _cell(y, n)
    k, fz = _cell(z, n)
    for c in range(8):
        di = c & 1
        dj = (c >> 1) & 1
        dk = (c >> 2) & 1
        wx = fx if di else 1.0 - fx
        wy = fy if dj else 1.0 - fy
        wz = fz if dk else 1.0 - fz
        weights[c] = wx * wy * wz
        slots[c] = _slot(i + di, j + dj, k + dk, n, dense, tmask)


# levels form the outer loop so one level's table stays cache-resident
@numba.njit(cache=True)
def _encode_fwd(x, tables, res, dense, out):
    n_pts = x.shape[0]
    n_lvl, t_size, n_feat = tables.shape
    tmask = t_size - 1
    slots = np.empty(8, dtype=np.int64)
    weights = np.empty(8, dtype=tables.dtype)
    for lvl in range(n_lvl):
        n = res[lvl]
        dn = dense[lvl]
        tab = tables[lvl]
        base = lvl * n_feat
        for p in range(n_pts):
            _corners(x[p, 0], x[p, 1], x[p, 2], n, dn, tmask, slots, weights)
            for f in range(n_feat):
                acc = 0.0
                for c in range(8):
                    acc += weights[c] * tab[slots[c], f]
                out[p, base + f] = acc


@numba.njit(cache=True)
def _encode_bwd(x, grad_out, res, dense, grad_tables):
    # serial scatter-add, so accumulation order (and the result) is fixed
    n_pts = x.shape[0]
    n_lvl, t_size, n_feat = grad_tables.shape
    tmask = t_size - 1
    slots = np.empty(8, dtype=np.int64)
    weights = np.empty(8, dtype=grad_tables.dtype)
    for lvl in range(n_lvl):
        n = res[lvl]
        dn = dense[lvl]
        gtab = grad_tables[lvl]
        base = lvl * n_feat
        for p in range(n_pts):
            _corners(x[p, 0], x[p, 1], x[p, 2], n, dn, tmask, slots, weights)
            for f in range(n_feat):
                g = grad_out[p, base + f]
                for c in range(8):
                    gtab[slots[c], f] += weights[c] * g


class _HashEncode(torch.autograd.Function):
    """Differentiable w.r.t. the tables only; positions are treated as constants."""

    @staticmethod
    def forward(ctx, x, tables, res, dense):
        xn = x.detach().contiguous().numpy()
        tn = tables.detach().contiguous().numpy()
        out = np.empty((xn.shape[0], tn.shape[0] * tn.shape[2]), dtype=tn.dtype)
        _encode_fwd(xn.astype(tn.dtype, copy=False), tn, res, dense, out)
        ctx.save_for_backward(x)
        ctx.meta = (res, dense, tables.shape, tables.dtype)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        res, dense, shape, dtype = ctx.meta
        grad = np.zeros(tuple(shape), dtype=torch.empty((), dtype=dtype).numpy().dtype)
        g = grad_out.detach().contiguous().numpy().astype(grad.dtype, copy=False)
        _encode_bwd(x.detach().contiguous().numpy().astype(grad.dtype, copy=False), g, res, dense, grad)
        return None, torch.from_numpy(grad), None, None


class HashGridEncoding(torch.nn.Module):
    """Trainable feature tables of shape (L, T, F); positions live in [0, 1]^3."""

    def __init__(self, cfg: HashGridConfig = HashGridConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        init = (torch.rand(cfg.levels, cfg.table_size, cfg.features, generator=gen, dtype=torch.float64) * 2 - 1) * 1e-4
        self.tables = torch.nn.Parameter(init.to(dtype))
        self._res = cfg.resolutions()
        self._dense = cfg.dense_levels()

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(n, 3) positions, clamped to the unit cube, -> (n, L*F) features."""
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3) positions, got {tuple(x.shape)}")
        return _HashEncode.apply(x, self.tables, self._res, self._dense)


def hash_encode(enc: HashGridEncoding, x) -> np.ndarray:
    """Numpy convenience wrapper around the encoding forward pass."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with torch.no_grad():
        return enc(torch.as_tensor(x)).numpy()
