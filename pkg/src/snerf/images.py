"""Image conventions and PNG I/O.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. On disk
they are 8-bit RGB PNGs, so a write/read round trip is exact only for
images already on the 1/255 grid (see `quantize`).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap an image to the values an 8-bit PNG can hold."""
    return to_uint8(img).astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bicubic resample in float precision (per channel, PIL 'F' mode)."""
    if img.shape[1] == width and img.shape[0] == height:
        return img.copy()
    chans = [
        np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((width, height), Image.BICUBIC))
        for c in range(img.shape[2])
    ]
    return np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)


def center_crop_resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Crop the largest centered window with the target aspect ratio, then resample."""
    h, w = img.shape[:2]
    aspect = width / height
    if w / h > aspect:
        cw, ch = int(round(h * aspect)), h
    else:
        cw, ch = w, int(round(w / aspect))
    x0, y0 = (w - cw) // 2, (h - ch) // 2
    return resize(img[y0:y0 + ch, x0:x0 + cw], width, height)
