"""Deterministic grayscale preprocessing: equalize, blur, normalize, resize.

Images are 2-D float64 arrays with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from .serialize import load_tensor
from .tensor import Tensor

GAUSSIAN_SIGMA = 0.8
ORDERS = ("equalize,blur,normalize,resize", "blur,equalize,normalize,resize")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    return img


def histogram_equalize(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map each pixel to the normalized CDF of its quantized intensity."""
    img = _check_image(img)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    levels = np.clip(np.floor(img * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(levels.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / levels.size
    return cdf[levels]


def gaussian_kernel3(sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    d = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur3(img: np.ndarray, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    """3x3 Gaussian blur with replicate padding."""
    img = _check_image(img)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image {h}x{w} is smaller than the 3x3 kernel")
    k = gaussian_kernel3(sigma)
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    # fixed accumulation order keeps the result bit-stable
    for i in range(3):
        for j in range(3):
            out += k[i, j] * padded[i : i + h, j : j + w]
    return out


def _bilinear_axis(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize, half-pixel centers (align_corners=False)."""
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize(img: np.ndarray, mean: float, std: float) -> Tensor:
    """(img - mean) / std as a 1x1xHxW tensor."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    img = _check_image(img)
    return Tensor(((img - mean) / std)[None, None])


@dataclass(frozen=True)
class PrepConfig:
    size: int = 128
    bins: int = 256
    sigma: float = GAUSSIAN_SIGMA
    order: str = ORDERS[0]
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"unknown preprocessing order {self.order!r}; choose one of {ORDERS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _enhance(img: np.ndarray, cfg: PrepConfig) -> np.ndarray:
    if cfg.order.startswith("equalize"):
        return gaussian_blur3(histogram_equalize(img, cfg.bins), cfg.sigma)
    return histogram_equalize(gaussian_blur3(img, cfg.sigma), cfg.bins)


def preprocess(img: np.ndarray, cfg: PrepConfig) -> np.ndarray:
    """Full pipeline; returns the normalized, resized H x W array."""
    x = normalize(_enhance(img, cfg), cfg.mean, cfg.std).data[0, 0]
    return resize(x, cfg.size, cfg.size)


def fit_normalization(images: Iterable[np.ndarray], cfg: PrepConfig) -> PrepConfig:
    """Pixel mean/std of the enhanced images, returned as an updated config."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for img in images:
        e = _enhance(img, cfg)
        total += float(e.sum())
        total_sq += float((e * e).sum())
        count += e.size
    if count == 0:
        raise ValueError("cannot fit normalization on an empty image set")
    mean = total / count
    std = float(np.sqrt(max(total_sq / count - mean * mean, 1e-12)))
    return PrepConfig(cfg.size, cfg.bins, cfg.sigma, cfg.order, mean, std)


def preprocess_batch(images: Sequence[np.ndarray], cfg: PrepConfig) -> np.ndarray:
    return np.stack([preprocess(img, cfg) for img in images])[:, None]


def read_image(path) -> np.ndarray:
    """Load an 8/16-bit grayscale PNG or a raw f64 ``.img`` tensor file as floats in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix == ".img":
        img = load_tensor(path)
        return np.clip(_check_image(img), 0.0, 1.0)
    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        raise ValueError(f"{path}: expected grayscale, got {arr.shape[2]} channels")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16):
        return arr.astype(np.float64) / 65535.0
    raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")


def write_png(path, img: np.ndarray) -> None:
    img = _check_image(img)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(q).save(path, optimize=False)
