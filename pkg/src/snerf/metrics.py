"""Image agreement metrics: PSNR, SSIM and a Gram-matrix texture score."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .styletransfer.haar import pyramid_levels

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateGramWarning(RuntimeWarning):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB for [0, 1] images, capped at 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return -10.0 * math.log10(mse)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) of the luminance images."""
    a, b = _pair(a, b)
    ga, gb = _gray(a), _gray(b)
    if min(ga.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")

    def wmean(x):
        return sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW)).mean(axis=(-1, -2))

    mu_a, mu_b = wmean(ga), wmean(gb)
    var_a = wmean(ga * ga) - mu_a * mu_a
    var_b = wmean(gb * gb) - mu_b * mu_b
    cov = wmean(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def gram_matrices(img, levels: int = 3) -> list[np.ndarray]:
    """Position-normalized Gram matrices of each Haar pyramid level."""
    img = np.asarray(img, dtype=np.float64)
    grams = []
    for f in pyramid_levels(img, levels):
        flat = f.reshape(-1, f.shape[-1])
        grams.append(flat.T @ flat / flat.shape[0])
    return grams


def gram_matrix_score(a, b, levels: int = 3) -> float:
    """1 - mean cosine similarity of per-level Gram matrices (0 = identical texture).

    When either image has an all-zero Gram matrix at some level the score
    is undefined; 1.0 is returned and a DegenerateGramWarning is issued.
    """
    a, b = _pair(a, b)
    sims = []
    for ga, gb in zip(gram_matrices(a, levels), gram_matrices(b, levels)):
        na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
        if na == 0 or nb == 0:
            warnings.warn("all-zero Gram matrix; gram_matrix_score set to 1", DegenerateGramWarning)
            return 1.0
        sims.append(float(np.sum(ga * gb) / (na * nb)))
    return float(1.0 - np.mean(sims))


METRIC_KEYS = ("ssim", "psnr_db", "gms")


@dataclass
class MetricsReport:
    rows: list  # dicts with ssim / psnr_db / gms and an optional lpips slot
    labels: list = field(default_factory=list)

    def _column(self, key):
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def mean(self, key: str) -> float:
        return float(self._column(key).mean())

    def std(self, key: str) -> float:
        col = self._column(key)
        return float(col.std(ddof=1)) if len(col) > 1 else 0.0

    @property
    def aggregate(self) -> dict:
        return {k: {"mean": self.mean(k), "std": self.std(k)} for k in METRIC_KEYS}

    def to_json(self) -> dict:
        return {"rows": self.rows, "labels": self.labels, "aggregate": self.aggregate, "n": len(self.rows)}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def table(self, name: str = "") -> str:
        """Aligned text table in the SSIM / PSNR / GMS column order."""
        head = f"{'':<12}{'SSIM':>16}{'PSNR':>18}{'GMS':>16}"
        agg = self.aggregate

        def cell(k, digits):
            return f"{agg[k]['mean']:.{digits}f} ± {agg[k]['std']:.{digits}f}"

        line = f"{name:<12}{cell('ssim', 2):>16}{cell('psnr_db', 2):>18}{cell('gms', 2):>16}"
        return head + "\n" + line

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(list(obj["rows"]), list(obj.get("labels", [])))


def evaluate_agreement(set_a, set_b, labels=None, gms_levels: int = 3) -> MetricsReport:
    """Per-pair SSIM / PSNR / GMS between two equally long image lists."""
    set_a, set_b = list(set_a), list(set_b)
    if len(set_a) != len(set_b):
        raise ValueError(f"image count mismatch: {len(set_a)} vs {len(set_b)}")
    rows = []
    for a, b in zip(set_a, set_b):
        rows.append({"ssim": ssim(a, b), "psnr_db": psnr(a, b), "gms": gram_matrix_score(a, b, gms_levels), "lpips": None})
    return MetricsReport(rows, list(labels) if labels is not None else [])
