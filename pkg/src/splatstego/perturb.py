"""Image perturbations: baseline JPEG round-trip, Gaussian blur, additive noise.

Images are float arrays ``(H, W, 3)`` in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# ITU T.81 Annex K, tables K.1 and K.2
LUMA_QTABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)

CHROMA_QTABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.float64).reshape(8, 8)

KINDS = ("jpeg", "blur", "noise")


@dataclass
class PerturbSpec:
    kind: str
    sweep: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        self.sweep = [float(v) for v in self.sweep]
        for v in self.sweep:
            check_parameter(self.kind, v)


def check_parameter(kind: str, value: float) -> None:
    if kind == "jpeg" and not 1 <= value <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {value}")
    if kind in ("blur", "noise") and value < 0:
        raise ValueError(f"{kind} parameter must be >= 0, got {value}")


def quality_scaled_table(base: np.ndarray, quality: float) -> np.ndarray:
    """libjpeg quality curve applied to a base table, entries clamped to [1, 255]."""
    q = int(round(quality))
    check_parameter("jpeg", q)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT = dct_matrix()


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], -1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], -1)


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Level shift, 8x8 DCT, quantize/dequantize, inverse DCT (one channel, 0..255 scale)."""
    blk = _blocks(plane - 128.0)
    coef = _DCT @ blk @ _DCT.T
    coef = np.round(coef / table) * table
    return _unblocks(_DCT.T @ coef @ _DCT) + 128.0


def jpeg_roundtrip(img: np.ndarray, quality: float) -> np.ndarray:
    """Baseline 4:4:4 JPEG quantization round-trip (no entropy coding stage)."""
    lum = quality_scaled_table(LUMA_QTABLE, quality)
    chrom = quality_scaled_table(CHROMA_QTABLE, quality)
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    ph, pw = -h % 8, -w % 8
    x = np.pad(src, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0
    ycc = rgb_to_ycbcr(x)
    out = np.stack([quantize_plane(ycc[..., 0], lum), quantize_plane(ycc[..., 1], chrom),
                    quantize_plane(ycc[..., 2], chrom)], -1)
    rgb = np.clip(ycbcr_to_rgb(out) / 255.0, 0.0, 1.0)
    return rgb[:h, :w].astype(np.asarray(img).dtype if np.asarray(img).dtype.kind == "f" else np.float64)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense (n, n) operator for 1-D Gaussian filtering with edge clamping."""
    if sigma == 0:
        return np.eye(n)
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for off, wgt in zip(range(-r, r + 1), k):
            m[i, min(max(i + off, 0), n - 1)] += wgt
    return m


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-clamped, kernel sums to 1."""
    check_parameter("blur", sigma)
    src = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return np.array(img, copy=True)
    bh = blur_matrix(src.shape[0], sigma)
    bw = blur_matrix(src.shape[1], sigma)
    out = np.einsum("ij,jkc->ikc", bh, src)
    out = np.einsum("kl,ilc->ikc", bw, out)
    return out.astype(np.asarray(img).dtype)


def add_noise(img: np.ndarray, std: float, seed: int = 0) -> np.ndarray:
    check_parameter("noise", std)
    rng = np.random.default_rng(seed)
    out = np.asarray(img, dtype=np.float64) + rng.normal(0.0, std, size=np.shape(img))
    return np.clip(out, 0.0, 1.0).astype(np.asarray(img).dtype)


def apply(kind: str, img: np.ndarray, value: float, seed: int = 0) -> np.ndarray:
    if kind == "jpeg":
        return jpeg_roundtrip(img, value)
    if kind == "blur":
        return gaussian_blur(img, value)
    if kind == "noise":
        return add_noise(img, value, seed)
    raise ValueError(f"unknown perturbation {kind!r}")


# ---------------------------------------------------------------- differentiable variants


def blur_tensor(x: Tensor, sigma: float) -> Tensor:
    """Blur a batch ``(B, H, W, 3)`` on the tape (same operator as :func:`gaussian_blur`)."""
    if sigma == 0:
        return x
    b, h, w, c = x.shape
    bh = ad.tensor(blur_matrix(h, sigma), dtype=x.dtype)
    bw = ad.tensor(blur_matrix(w, sigma).T, dtype=x.dtype)
    planes = ad.transpose(x, (0, 3, 1, 2))
    out = ad.matmul(ad.matmul(bh, planes), bw)
    return ad.transpose(out, (0, 2, 3, 1))


def jpeg_straight_through(x: Tensor, quality: float) -> Tensor:
    """JPEG round-trip forward, identity backward."""
    out = np.stack([jpeg_roundtrip(img, quality) for img in x.data]).astype(x.dtype)
    return ad.custom_op("jpeg_straight_through", (x,), out, lambda g: (g,))


def augment(x: Tensor, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Random train-time perturbation of a render batch."""
    if mode == "off":
        return x
    if mode == "blur":
        return blur_tensor(x, float(rng.uniform(0.0, 2.0)))
    if mode == "jpeg_approx":
        return jpeg_straight_through(x, float(rng.integers(10, 96)))
    raise ValueError(f"unknown augmentation {mode!r}")
