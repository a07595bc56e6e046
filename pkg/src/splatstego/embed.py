"""Generation side: payload features, cross-attention injection, scene deltas.

The generator here is a delta network over a fixed base scene: per-primitive
features ``f_I`` are computed from the base primitives, modulated by the
payload tokens ``f_H`` through cross-attention, and decoded into bounded
color/opacity (optionally scale/center) offsets. Its output layers start at
zero, so the untrained generator reproduces the base scene exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import AttentionConfig, Tensor
from .optim import ParamStore
from .scene import GaussianScene

DELTA_CAPS = {"color": 0.2, "opacity": 1.0, "scale": 0.1, "center": 0.01}
MAX_IMAGE_SIDE = 4096


class PayloadError(ValueError):
    pass


@dataclass
class Payload:
    """Hidden image ``(h, w, 3)`` in [0, 1], or a 0/1 bit vector."""

    kind: str  # "image" | "bits"
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in ("image", "bits"):
            raise PayloadError(f"unknown payload kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.size == 0:
            raise PayloadError("empty payload")
        if self.kind == "bits":
            self.data = self.data.astype(np.uint8).reshape(-1)
            if not np.isin(self.data, (0, 1)).all():
                raise PayloadError("bit payload must contain only 0/1")
        else:
            if self.data.ndim == 2:
                self.data = np.repeat(self.data[..., None], 3, axis=2)
            if self.data.ndim != 3 or self.data.shape[2] != 3:
                raise PayloadError(f"image payload must be (h, w, 3), got {self.data.shape}")
            self.data = self.data.astype(np.float32)

    @classmethod
    def image(cls, img) -> "Payload":
        return cls("image", img)

    @classmethod
    def bits(cls, bits) -> "Payload":
        return cls("bits", bits)


def null_image(resolution: int = 64, value: float = 0.5) -> np.ndarray:
    return np.full((resolution, resolution, 3), value, dtype=np.float32)


def resize_image(img: np.ndarray, resolution: int) -> np.ndarray:
    if img.shape[0] == resolution and img.shape[1] == resolution:
        return img.astype(np.float32)
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((resolution, resolution), Image.BILINEAR)) for c in range(3)]
    return np.clip(np.stack(chans, -1), 0.0, 1.0).astype(np.float32)


def sinusoid_table(positions: np.ndarray, width: int) -> np.ndarray:
    """Transformer-style sinusoidal embedding of scalar positions."""
    half = width // 2
    freqs = 1.0 / (100.0 ** (np.arange(half) / max(half, 1)))
    ang = positions[:, None] * freqs[None]
    out = np.zeros((len(positions), width))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out


@dataclass
class HiddenEncoder:
    """Frozen payload feature extractor.

    ``builtin_random`` embeds non-overlapping patches with a seeded random
    linear filter bank plus a 2-D sinusoidal position code;
    ``file_import`` passes externally computed tokens through unchanged.
    """

    d: int = 32
    patch_size: int = 8
    resolution: int = 64
    seed: int = 0
    mode: str = "builtin_random"
    max_bits: int = 128
    imported: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("builtin_random", "file_import"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        if self.resolution % self.patch_size:
            raise ValueError("resolution must be a multiple of patch_size")
        rng = np.random.default_rng(self.seed)
        k = self.patch_size
        self.patch_weights = (rng.normal(size=(self.d, 3 * k * k)) / np.sqrt(3 * k * k)).astype(np.float32)
        self.bit_lift = (rng.normal(size=(self.max_bits, self.d)) / np.sqrt(self.max_bits)).astype(np.float32)
        g = self.resolution // k
        rows, cols = np.divmod(np.arange(g * g), g)
        pe = np.concatenate([sinusoid_table(rows.astype(float), self.d // 2),
                             sinusoid_table(cols.astype(float), self.d - self.d // 2)], axis=1)
        self.position_code = (0.5 * pe).astype(np.float32)

    @property
    def tokens_per_image(self) -> int:
        return (self.resolution // self.patch_size) ** 2


def extract_hidden_features(payload: Payload, enc: HiddenEncoder) -> np.ndarray:
    """Payload tokens ``f_H`` of shape (T, d)."""
    if enc.mode == "file_import":
        if enc.imported is None:
            raise PayloadError("file_import encoder has no imported features")
        tokens = np.asarray(enc.imported, dtype=np.float32)
        if tokens.ndim != 2 or tokens.shape[1] != enc.d:
            raise PayloadError(f"imported features must be (T, {enc.d}), got {tokens.shape}")
        return tokens.copy()
    if payload.kind == "bits":
        n = payload.data.size
        if n > enc.max_bits:
            raise PayloadError(f"bit payload of length {n} exceeds max {enc.max_bits}")
        row = (2.0 * payload.data.astype(np.float32) - 1.0)[None]
        return (row @ enc.bit_lift[:n]).astype(np.float32)
    img = payload.data
    if max(img.shape[:2]) > MAX_IMAGE_SIDE:
        raise PayloadError(f"image payload larger than {MAX_IMAGE_SIDE} px")
    img = resize_image(img, enc.resolution)
    k = enc.patch_size
    g = enc.resolution // k
    patches = img.reshape(g, k, g, k, 3).transpose(0, 2, 4, 1, 3).reshape(g * g, 3 * k * k)
    tokens = (patches - 0.5) @ enc.patch_weights.T + enc.position_code
    return tokens.astype(np.float32)


# ---------------------------------------------------------------- parameters


def _dense(rng, fan_in, fan_out, gain=np.sqrt(2.0)):
    return (rng.normal(size=(fan_in, fan_out)) * gain / np.sqrt(fan_in)).astype(np.float32)


@dataclass
class GeneratorConfig:
    d: int = 32
    hidden: int = 64
    pe_freqs: int = 4
    heads: int = 1
    deltas: tuple = ("color", "opacity")
    injection: str = "cross_attention"  # or "concat_mlp"

    def __post_init__(self):
        self.deltas = tuple(self.deltas)
        bad = set(self.deltas) - set(DELTA_CAPS)
        if bad or not self.deltas:
            raise ValueError(f"invalid delta channels {self.deltas}")
        if self.injection not in ("cross_attention", "concat_mlp"):
            raise ValueError(f"unknown injection {self.injection!r}")
        AttentionConfig(self.d, self.heads)

    @property
    def out_dim(self) -> int:
        sizes = {"color": 3, "opacity": 1, "scale": 3, "center": 3}
        return sum(sizes[k] for k in self.deltas)


def init_generator(store: ParamStore, cfg: GeneratorConfig, feat_dim: int, seed: int = 0) -> None:
    """Add generator (theta) and injector (phi) groups to ``store``."""
    rng = np.random.default_rng(seed)
    d, h = cfg.d, cfg.hidden
    store.add("enc.w1", "theta", _dense(rng, feat_dim, h))
    store.add("enc.b1", "theta", np.zeros(h, np.float32))
    store.add("enc.w2", "theta", _dense(rng, h, d, 1.0))
    store.add("enc.b2", "theta", np.zeros(d, np.float32))
    store.add("enc.ln_g", "theta", np.ones(d, np.float32))
    store.add("enc.ln_b", "theta", np.zeros(d, np.float32))
    store.add("head.w1", "theta", _dense(rng, d, h))
    store.add("head.b1", "theta", np.zeros(h, np.float32))
    store.add("head.w2", "theta", np.zeros((h, cfg.out_dim), np.float32))
    store.add("head.b2", "theta", np.zeros(cfg.out_dim, np.float32))
    if cfg.injection == "cross_attention":
        store.add("inj.wq", "phi", _dense(rng, d, d, 1.0))
        store.add("inj.wk", "phi", _dense(rng, d, d, 1.0))
        store.add("inj.wv", "phi", _dense(rng, d, d, 1.0))
        store.add("inj.wout", "phi", np.zeros((d, d), np.float32))
    else:
        store.add("inj.w1", "phi", _dense(rng, 2 * d, h))
        store.add("inj.b1", "phi", np.zeros(h, np.float32))
        store.add("inj.wout", "phi", np.zeros((h, d), np.float32))


def primitive_features(base: GaussianScene, pe_freqs: int = 4) -> np.ndarray:
    """Fixed per-primitive input features for the feature encoder."""
    x = base.means.astype(np.float64)
    center = x.mean(axis=0)
    radius = max(np.abs(x - center).max(), 1e-6)
    xn = (x - center) / radius
    q = base.quats.astype(np.float64)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    ls = base.log_scales.astype(np.float64)
    ls = ls - ls.mean()
    parts = [xn, ls, q, base.opacity_logits.astype(np.float64)[:, None] / 4.0,
             base.colors.astype(np.float64) - 0.5]
    for k in range(pe_freqs):
        parts += [np.sin((2 ** k) * np.pi * xn), np.cos((2 ** k) * np.pi * xn)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def feature_dim(pe_freqs: int = 4) -> int:
    return 14 + 6 * pe_freqs


def inject(f_i: Tensor, f_h: Tensor, store: ParamStore, cfg: Optional[GeneratorConfig] = None) -> Tensor:
    """Residual payload injection: ``f_I + attention(f_I W_Q, f_H W_K, f_H W_V) W_out``."""
    cfg = cfg or GeneratorConfig(d=f_i.shape[1])
    if f_i.shape[1] != f_h.shape[1]:
        raise ad.ShapeError(f"token widths differ: f_I {f_i.shape[1]} vs f_H {f_h.shape[1]}")
    if cfg.injection == "concat_mlp":
        pooled = ad.matmul(ad.tensor(np.ones((f_i.shape[0], 1)), dtype=f_i.dtype),
                           ad.mean(f_h, axis=0, keepdims=True))
        hcat = ad.relu(ad.add(ad.matmul(ad.concat([f_i, pooled], axis=1), store["inj.w1"]), store["inj.b1"]))
        return ad.add(f_i, ad.matmul(hcat, store["inj.wout"]))
    att = attention_update(f_i, f_h, store, cfg)
    return ad.add(f_i, ad.matmul(att, store["inj.wout"]))


def attention_update(f_i: Tensor, f_h: Tensor, store: ParamStore, cfg: GeneratorConfig) -> Tensor:
    """Attention output before the output projection (N x d)."""
    q = ad.matmul(f_i, store["inj.wq"])
    k = ad.matmul(f_h, store["inj.wk"])
    v = ad.matmul(f_h, store["inj.wv"])
    return ad.cross_attention(q, k, v, AttentionConfig(cfg.d, cfg.heads))


@dataclass
class GeneratedScene:
    """Tensors of the generated scene; feeds the rasterizer tape op."""

    means: Tensor
    log_scales: Tensor
    quats: Tensor
    opacity_logits: Tensor
    colors: Tensor
    background: np.ndarray

    def tensors(self) -> tuple:
        return (self.means, self.log_scales, self.quats, self.opacity_logits, self.colors)

    def to_scene(self) -> GaussianScene:
        return GaussianScene(*(t.data.copy() for t in self.tensors()), self.background.copy())


def generate(base: GaussianScene, f_h: np.ndarray, store: ParamStore, cfg: GeneratorConfig,
             features: Optional[np.ndarray] = None) -> GeneratedScene:
    """Steganographic scene from the base scene and payload tokens."""
    if len(base) == 0:
        raise ValueError("cannot generate from an empty base scene")
    dtype = store["enc.w1"].dtype
    feats = primitive_features(base, cfg.pe_freqs) if features is None else features
    x = ad.tensor(feats, dtype=dtype)
    h = ad.relu(ad.add(ad.matmul(x, store["enc.w1"]), store["enc.b1"]))
    f_i = ad.add(ad.matmul(h, store["enc.w2"]), store["enc.b2"])
    f_i = ad.layer_norm(f_i, store["enc.ln_g"], store["enc.ln_b"])
    f_i = inject(f_i, ad.tensor(f_h, dtype=dtype), store, cfg)
    h2 = ad.relu(ad.add(ad.matmul(f_i, store["head.w1"]), store["head.b1"]))
    raw = ad.add(ad.matmul(h2, store["head.w2"]), store["head.b2"])

    fields = {
        "means": ad.tensor(base.means, dtype=dtype),
        "log_scales": ad.tensor(base.log_scales, dtype=dtype),
        "quats": ad.tensor(base.quats, dtype=dtype),
        "opacity_logits": ad.tensor(base.opacity_logits, dtype=dtype),
        "colors": ad.tensor(base.colors, dtype=dtype),
    }
    col = 0
    diameter = base.diameter()
    for name in cfg.deltas:
        width = 1 if name == "opacity" else 3
        part = raw[:, col:col + width] if width > 1 else ad.reshape(raw[:, col:col + 1], (-1,))
        col += width
        cap = DELTA_CAPS[name] * (diameter if name == "center" else 1.0)
        delta = ad.scale(ad.tanh(part), cap)
        if name == "color":
            fields["colors"] = ad.clip(ad.add(fields["colors"], delta), 0.0, 1.0)
        elif name == "opacity":
            fields["opacity_logits"] = ad.add(fields["opacity_logits"], delta)
        elif name == "scale":
            fields["log_scales"] = ad.add(fields["log_scales"], delta)
        else:
            fields["means"] = ad.add(fields["means"], delta)
    return GeneratedScene(fields["means"], fields["log_scales"], fields["quats"],
                          fields["opacity_logits"], fields["colors"], base.background.astype(dtype))
