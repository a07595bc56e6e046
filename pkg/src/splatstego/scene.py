"""Gaussian scene container."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

SCALE_MIN = 1e-6
SCALE_MAX = 1e3
FIELDS = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class GaussianScene:
    """Ordered set of anisotropic Gaussians.

    Per primitive: center, log of per-axis std-dev, rotation quaternion
    (w, x, y, z), opacity logit and RGB color in [0, 1].
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales).reshape(n, 3)
        self.quats = np.asarray(self.quats).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits).reshape(n)
        self.colors = np.asarray(self.colors).reshape(n, 3)
        self.background = np.asarray(self.background).reshape(3)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, background=(1.0, 1.0, 1.0), dtype=np.float32) -> "GaussianScene":
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, 3), np.asarray(background, dtype=dtype))

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def arrays(self) -> tuple:
        return tuple(getattr(self, f) for f in FIELDS)

    def replace(self, **kw) -> "GaussianScene":
        vals = {f: getattr(self, f) for f in FIELDS}
        vals["background"] = self.background
        vals.update(kw)
        return GaussianScene(**vals)

    def astype(self, dtype) -> "GaussianScene":
        return GaussianScene(*(a.astype(dtype) for a in self.arrays()), self.background.astype(dtype))

    def diameter(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.means.max(0) - self.means.min(0)))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays() + (self.background,):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: "GaussianScene") -> bool:
        """Bit-exact equality of every field."""
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays() + (self.background,), other.arrays() + (other.background,))
        )
