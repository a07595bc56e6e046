"""Recovery side: U-Net style decoder with an image head and a bit head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore


TEMPLATE_GAIN = 8.0
BIT_NULL_LOGIT = 4.0  # logit of every bit in the null (all-zero) string


class DecodeError(ValueError):
    pass


@dataclass
class DecoderConfig:
    widths: tuple = (16, 32, 64)
    render_resolution: int = 128
    hidden_resolution: int = 64
    pos_freqs: int = 4
    max_bits: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("decoder needs exactly three stage widths")
        if self.render_resolution != 2 * self.hidden_resolution:
            raise ValueError("render resolution must be twice the hidden resolution")
        if self.render_resolution % 8:
            raise ValueError("render resolution must be divisible by 8")

    @property
    def in_channels(self) -> int:
        return 3 + 4 * self.pos_freqs


def position_channels(resolution: int, freqs: int) -> np.ndarray:
    """Fixed sin/cos pixel-coordinate planes, shape (4 * freqs, res, res)."""
    t = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    yy, xx = np.meshgrid(t, t, indexing="ij")
    planes = []
    for k in range(freqs):
        w = np.pi * 2 ** k
        planes += [np.sin(w * xx), np.cos(w * xx), np.sin(w * yy), np.cos(w * yy)]
    return np.stack(planes).astype(np.float32) if planes else np.zeros((0, resolution, resolution), np.float32)


def _he(rng, shape, fan_in):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_decoder(store: ParamStore, cfg: DecoderConfig, seed: int = 0, reference=None) -> None:
    """Add the decoder (psi) groups to ``store``.

    ``reference`` is the clean checking-view render; the detection filter
    reads the difference to it (a frozen buffer, mid-gray when absent).
    """
    rng = np.random.default_rng(seed)
    c0 = cfg.in_channels
    w1, w2, w3 = cfg.widths

    def conv(name, cin, cout, k):
        store.add(f"{name}.w", "psi", _he(rng, (cout, cin, k, k), cin * k * k))
        store.add(f"{name}.b", "psi", np.zeros(cout, np.float32))

    def up(name, cin, cout):
        store.add(f"{name}.w", "psi", _he(rng, (cin, cout, 2, 2), cin))
        store.add(f"{name}.b", "psi", np.zeros(cout, np.float32))

    conv("dec.e1", c0, w1, 3)
    conv("dec.e2", w1, w2, 3)
    conv("dec.e3", w2, w3, 3)
    up("dec.u2", w3, w2)
    conv("dec.f2", 2 * w2, w2, 3)
    up("dec.u1", w2, w1)
    conv("dec.f1", 2 * w1, w1, 3)
    conv("dec.img", w1, 3, 1)
    store.add("dec.bits.w", "psi", (rng.normal(size=(w3, cfg.max_bits)) * 0.01).astype(np.float32))
    store.add("dec.bits.b", "psi", np.zeros(cfg.max_bits, np.float32))
    hr = cfg.hidden_resolution
    store.add("dec.gate.w", "psi", np.zeros((w3, 1), np.float32))
    rr = cfg.render_resolution
    store.add("dec.gate.filter", "psi", np.zeros((rr * rr * 3, 1), np.float32))
    ref = np.full((rr, rr, 3), 0.5, np.float32) if reference is None else np.asarray(reference, np.float32)
    if ref.shape != (rr, rr, 3):
        raise DecodeError(f"reference render must be {rr}x{rr}x3, got {ref.shape}")
    store.buffers["dec.reference"] = ref.copy()
    store.add("dec.gate.b", "psi", np.zeros(1, np.float32))
    store.add("dec.template", "psi", np.zeros((hr, hr, 3), np.float32))


def _conv(x, store, name, stride=1, padding=1):
    return ad.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, padding=padding)


def decoder_forward(renders: Tensor, store: ParamStore, cfg: DecoderConfig):
    """Run the decoder on a batch of renders ``(B, H, W, 3)``.

    Returns ``(images, bit_logits)``: ``(B, h, h, 3)`` in (0, 1) and
    ``(B, max_bits)``.
    """
    if renders.ndim == 3:
        renders = ad.reshape(renders, (1,) + renders.shape)
    b, h, w, c = renders.shape
    if h != cfg.render_resolution or w != cfg.render_resolution or c != 3:
        raise DecodeError(f"decoder expects {cfg.render_resolution}x{cfg.render_resolution}x3 renders, "
                          f"got {h}x{w}x{c}")
    x = ad.transpose(renders, (0, 3, 1, 2))
    pos = position_channels(h, cfg.pos_freqs)
    if len(pos):
        x = ad.concat([x, ad.tensor(np.broadcast_to(pos, (b,) + pos.shape), dtype=renders.dtype)], axis=1)
    e1 = ad.leaky_relu(_conv(x, store, "dec.e1", stride=2))
    e2 = ad.leaky_relu(_conv(e1, store, "dec.e2", stride=2))
    e3 = ad.leaky_relu(_conv(e2, store, "dec.e3", stride=2))
    u2 = ad.leaky_relu(ad.conv2d_transpose(e3, store["dec.u2.w"], store["dec.u2.b"], stride=2))
    f2 = ad.leaky_relu(_conv(ad.concat([u2, e2], axis=1), store, "dec.f2"))
    u1 = ad.leaky_relu(ad.conv2d_transpose(f2, store["dec.u1.w"], store["dec.u1.b"], stride=2))
    f1 = ad.leaky_relu(_conv(ad.concat([u1, e1], axis=1), store, "dec.f1"))
    pooled = ad.mean(e3, axis=(2, 3))
    # global detection gate scales a learned template added to the image logits
    # detection logit: pooled bottleneck plus a full-resolution linear filter on the render
    ref = store.buffers.get("dec.reference")
    flat = ad.reshape(ad.sub(renders, 0.5 if ref is None else ref.astype(renders.dtype)), (b, h * w * c))
    gate = ad.add(ad.add(ad.matmul(pooled, store["dec.gate.w"]), ad.matmul(flat, store["dec.gate.filter"])),
                  store["dec.gate.b"])
    gate = ad.reshape(ad.sigmoid(gate), (b, 1, 1, 1))
    logits_img = ad.transpose(_conv(f1, store, "dec.img", padding=0), (0, 2, 3, 1))
    img = ad.sigmoid(ad.add(logits_img, ad.mul(gate, ad.scale(store["dec.template"], TEMPLATE_GAIN))))
    # without a detected payload the bit head falls back to the all-zero null string
    raw = ad.add(ad.matmul(pooled, store["dec.bits.w"]), store["dec.bits.b"])
    g = ad.reshape(gate, (b, 1))
    logits = ad.sub(ad.mul(g, raw), ad.scale(ad.sub(1.0, g), BIT_NULL_LOGIT))
    return img, logits


def decode_image(render, store: ParamStore, cfg: DecoderConfig) -> np.ndarray:
    """Recovered hidden image for one render ``(H, W, 3)``."""
    r = render if isinstance(render, Tensor) else ad.tensor(render, dtype=store["dec.e1.w"].dtype)
    img, _ = decoder_forward(r, store, cfg)
    return img.data[0]


def bit_probabilities(logits: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logits, dtype=np.float64)))


def threshold_bits(probs: np.ndarray) -> np.ndarray:
    """Bits from probabilities; exactly 0.5 maps to 0."""
    return (np.asarray(probs) > 0.5).astype(np.uint8)


def decode_bits(render, store: ParamStore, cfg: DecoderConfig, length: int):
    """``(probabilities, bits)`` for the first ``length`` bit-head outputs."""
    if length > cfg.max_bits:
        raise DecodeError(f"requested {length} bits but the head has {cfg.max_bits}")
    r = render if isinstance(render, Tensor) else ad.tensor(render, dtype=store["dec.e1.w"].dtype)
    _, logits = decoder_forward(r, store, cfg)
    probs = bit_probabilities(logits.data[0, :length])
    return probs, threshold_bits(probs)
