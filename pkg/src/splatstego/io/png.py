"""8-bit PNG images as float arrays in [0, 1]."""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    pass


def load_png(path, keep_alpha: bool = False) -> np.ndarray:
    """Read an 8-bit RGB/RGBA/gray PNG; byte ``v`` maps to ``v / 255``."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG ({im.format})")
            if im.mode in ("I", "I;16", "I;16B", "F"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {im.mode})")
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            elif im.mode in ("L", "1"):
                im = im.convert("RGB")
            elif im.mode == "LA":
                im = im.convert("RGBA")
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: unsupported bit depth ({arr.dtype})")
    if arr.shape[-1] == 4 and not keep_alpha:
        arr = arr[..., :3]
    return arr.astype(np.float32) / np.float32(255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to bytes, rounding halves up."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] not in (3, 4)):
        raise ImageFormatError(f"cannot save image of shape {arr.shape}")
    data = arr if arr.dtype == np.uint8 else to_bytes(arr)
    Image.fromarray(data).save(path, format="PNG")
