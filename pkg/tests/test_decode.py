import numpy as np
import pytest

from splatstego import autodiff as ad
from splatstego.decode import (BIT_NULL_LOGIT, DecodeError, DecoderConfig, bit_probabilities, decode_bits, decode_image,
                               decoder_forward, init_decoder, position_channels, threshold_bits)
from splatstego.gradcheck import numeric_gradient
from splatstego.optim import ParamStore

SMALL = DecoderConfig(widths=(4, 8, 8), render_resolution=16, hidden_resolution=8, pos_freqs=2, max_bits=16)


def dec_store(cfg=SMALL, seed=0, dtype=np.float32, exercise_gate=False):
    s = ParamStore()
    rng = np.random.default_rng(seed + 100)
    init_decoder(s, cfg, seed, reference=rng.uniform(0, 1, (cfg.render_resolution,) * 2 + (3,)))
    if exercise_gate:
        for name in ("dec.template", "dec.gate.filter", "dec.gate.w", "dec.bits.w"):
            s[name].data[...] = rng.normal(scale=0.3, size=s[name].shape)
    return s if dtype == np.float32 else s.astype(dtype)


def test_output_shapes_and_range():
    s = dec_store()
    r = np.random.default_rng(1).uniform(0, 1, (3, 16, 16, 3)).astype(np.float32)
    img, logits = decoder_forward(ad.tensor(r), s, SMALL)
    assert img.shape == (3, 8, 8, 3) and logits.shape == (3, 16)
    assert np.all(img.data > 0) and np.all(img.data < 1)


def test_deterministic():
    r = np.random.default_rng(2).uniform(0, 1, (16, 16, 3)).astype(np.float32)
    a = decode_image(r, dec_store(seed=3), SMALL)
    b = decode_image(r, dec_store(seed=3), SMALL)
    assert a.tobytes() == b.tobytes()


def test_render_gradient_matches_finite_differences():
    s = dec_store(dtype=np.float64, exercise_gate=True)
    rng = np.random.default_rng(4)
    r = ad.tensor(rng.uniform(0, 1, (1, 16, 16, 3)), requires_grad=True, dtype=np.float64)
    wi = rng.normal(size=(1, 8, 8, 3))
    wb = rng.normal(size=(1, 16))

    def f():
        img, logits = decoder_forward(r, s, SMALL)
        return ad.add(ad.sum(ad.mul(img, wi)), ad.sum(ad.mul(logits, wb)))

    with ad.Tape() as tape:
        out = f()
    (g,) = tape.gradient(out, [r])
    num = numeric_gradient(f, r)
    assert np.max(np.abs(g - num)) < 1e-4


def test_untrained_decoder_returns_null_string():
    # gate 0.5 at init: logits = 0.5 * raw - 0.5 * BIT_NULL_LOGIT with raw near 0
    s = dec_store()
    r = np.random.default_rng(5).uniform(0, 1, (16, 16, 3)).astype(np.float32)
    probs, bits = decode_bits(r, s, SMALL, 16)
    expect = 1 / (1 + np.exp(0.5 * BIT_NULL_LOGIT))
    assert np.all(np.abs(probs - expect) < 0.01)
    assert bits.dtype == np.uint8 and not bits.any()


def test_closed_gate_gives_null_and_open_gate_gives_raw_logits():
    s = dec_store(dtype=np.float64)
    r = ad.tensor(np.random.default_rng(6).uniform(0, 1, (1, 16, 16, 3)))
    s["dec.gate.b"].data[...] = -60.0
    _, closed = decoder_forward(r, s, SMALL)
    assert np.allclose(closed.data, -BIT_NULL_LOGIT)
    s["dec.gate.b"].data[...] = 60.0
    _, opened = decoder_forward(r, s, SMALL)
    assert np.allclose(opened.data, s["dec.bits.b"].data, atol=0.1)


def test_threshold_tie_maps_to_zero():
    assert threshold_bits(np.array([0.5, 0.5000001, 0.4999999])).tolist() == [0, 1, 0]
    assert bit_probabilities(np.array([0.0]))[0] == 0.5


def test_bit_length_limit():
    with pytest.raises(DecodeError):
        decode_bits(np.zeros((16, 16, 3), np.float32), dec_store(), SMALL, 17)


def test_wrong_resolution_rejected():
    with pytest.raises(DecodeError):
        decode_image(np.zeros((32, 32, 3), np.float32), dec_store(), SMALL)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(render_resolution=64, hidden_resolution=64)
    with pytest.raises(ValueError):
        DecoderConfig(widths=(4, 8))


def test_position_channels():
    p = position_channels(16, 3)
    assert p.shape == (12, 16, 16)
    assert np.all(np.abs(p) <= 1)
    assert position_channels(8, 0).shape == (0, 8, 8)


def test_gate_reads_difference_to_reference():
    # identical inputs to the filter path when the render equals the reference
    s = dec_store(exercise_gate=True)
    ref = s.buffers["dec.reference"]
    s2 = dec_store(exercise_gate=True)
    s2["dec.gate.filter"].data[...] = 0
    a = decode_image(ref, s, SMALL)
    b = decode_image(ref, s2, SMALL)
    assert np.allclose(a, b, atol=1e-6)
