"""Externally computed hidden-feature tokens.

Layout (little-endian): magic ``GSFT``, u32 version, u32 T, u32 d, then
T*d float32 values row-major.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GSFT"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFileError(ValueError):
    pass


def save_feature_file(tokens: np.ndarray, path) -> None:
    tokens = np.ascontiguousarray(tokens, dtype="<f4")
    if tokens.ndim != 2:
        raise FeatureFileError(f"feature tokens must be 2-D, got {tokens.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, tokens.shape[0], tokens.shape[1]))
        fh.write(tokens.tobytes())


def load_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise FeatureFileError(f"{path}: bad magic (expected {MAGIC!r})")
        if len(head) < _HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        _, version, t, d = _HEADER.unpack(head)
        if version != VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        if t == 0 or d == 0:
            raise FeatureFileError(f"{path}: empty token matrix ({t}x{d})")
        body = fh.read()
    if len(body) != 4 * t * d:
        raise FeatureFileError(f"{path}: header declares {t}x{d} tokens but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float32)
