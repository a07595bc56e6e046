"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import zlib

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error
    rel_tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.rel_tol

    def __str__(self):
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        return "\n".join(lines + [f"max={self.max_error:.3e} tol={self.rel_tol:g} {'PASS' if self.passed else 'FAIL'}"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, relative to the larger gradient's scale."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    base = param.data
    flat = base.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        work = flat.copy()
        work[i] = orig + h
        param.data = work.reshape(base.shape)
        fp = float(f().data)
        work[i] = orig - h
        param.data = work.reshape(base.shape)
        fm = float(f().data)
        grad[i] = (fp - fm) / (2 * h)
    param.data = base
    return grad.reshape(base.shape)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    rel_tol: float = 1e-5,
    h: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against finite differences.

    ``params`` must be float64 tensors with ``requires_grad`` set; ``f`` is
    re-evaluated from scratch for every perturbation.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or 'param'}")
    with Tape() as tape:
        out = f()
    analytic = tape.gradient(out, params)
    errors = {}
    for idx, (p, a) in enumerate(zip(params, analytic)):
        num = numeric_gradient(f, p, h)
        errors[p.name or f"param{idx}"] = relative_error(a, num)
    return GradCheckReport(errors, rel_tol)


# ---------------------------------------------------------------- registered suites


def _param(rng, shape, lo=-1.0, hi=1.0, name="x", away=0.0):
    """Random float64 parameter; ``away`` keeps entries off kinks at zero."""
    v = rng.uniform(lo, hi, size=shape)
    if away:
        v = np.where(np.abs(v) < away, np.sign(v + 1e-12) * away, v)
    return tensor_param(v, name)


def tensor_param(v, name="x") -> Tensor:
    return Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=name)


def _weighted(rng, out_shape):
    return rng.normal(size=out_shape)


def _op_suite(build, params, rng):
    """Scalarize an op output with a fixed random projection."""
    from . import autodiff as ad

    probe = {}

    def f():
        y = build()
        if "w" not in probe:
            probe["w"] = _weighted(rng, y.shape)
        return ad.sum(ad.mul(y, probe["w"]))

    return f, params


def op_suites(seed: int = 0) -> dict:
    """Name -> zero-arg callable returning a GradCheckReport, one per tape op."""
    from . import autodiff as ad

    def make(name, fn):
        def run():
            rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
            f, params = fn(rng)
            return grad_check(f, params)
        return run

    def unary(op, **kw):
        def fn(rng):
            a = _param(rng, (3, 4), **kw)
            return _op_suite(lambda: op(a), [a], rng)
        return fn

    def binary(op, b_shape=(3, 4), b_lo=-1.0):
        def fn(rng):
            a = _param(rng, (3, 4), name="a")
            b = _param(rng, b_shape, lo=b_lo, name="b")
            return _op_suite(lambda: op(a, b), [a, b], rng)
        return fn

    def matmul(rng):
        a, b = _param(rng, (3, 4), name="a"), _param(rng, (4, 2), name="b")
        return _op_suite(lambda: ad.matmul(a, b), [a, b], rng)

    def layer_norm(rng):
        a = _param(rng, (3, 5), name="a")
        g, b = _param(rng, (5,), 0.5, 1.5, "gamma"), _param(rng, (5,), name="beta")
        return _op_suite(lambda: ad.layer_norm(a, g, b), [a, g, b], rng)

    def bce(rng):
        z = _param(rng, (2, 6), -3, 3, "logits")
        y = (rng.uniform(size=(2, 6)) > 0.5).astype(np.float64)
        return (lambda: ad.bce_with_logits(z, y)), [z]

    def conv(rng):
        x = _param(rng, (1, 2, 6, 6), name="x")
        w = _param(rng, (3, 2, 3, 3), name="w")
        b = _param(rng, (3,), name="b")
        return _op_suite(lambda: ad.conv2d(x, w, b, stride=2, padding=1), [x, w, b], rng)

    def conv_t(rng):
        x = _param(rng, (1, 2, 3, 3), name="x")
        w = _param(rng, (2, 3, 2, 2), name="w")
        b = _param(rng, (3,), name="b")
        return _op_suite(lambda: ad.conv2d_transpose(x, w, b, stride=2), [x, w, b], rng)

    def concat(rng):
        a, b = _param(rng, (2, 3), name="a"), _param(rng, (2, 2), name="b")
        return _op_suite(lambda: ad.concat([a, b], axis=1), [a, b], rng)

    def attention(rng):
        q, k, v = (_param(rng, (5, 4), name=n) for n in "qkv")
        cfg = ad.AttentionConfig(4, 2)
        return _op_suite(lambda: ad.cross_attention(q, k, v, cfg), [q, k, v], rng)

    specs = {
        "add": binary(ad.add, (4,)),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul, (3, 1)),
        "div": binary(ad.div, b_lo=0.5),
        "neg": unary(ad.neg),
        "scale": unary(lambda a: ad.scale(a, -1.7)),
        "relu": unary(ad.relu, away=0.05),
        "leaky_relu": unary(ad.leaky_relu, away=0.05),
        "sigmoid": unary(ad.sigmoid),
        "tanh": unary(ad.tanh),
        "exp": unary(ad.exp),
        "sin": unary(ad.sin),
        "cos": unary(ad.cos),
        "abs": unary(ad.abs, away=0.05),
        "clip": unary(lambda a: ad.clip(a, -0.5, 0.5)),
        "sum": unary(lambda a: ad.sum(a, axis=0)),
        "mean": unary(lambda a: ad.mean(a, axis=1, keepdims=True)),
        "matmul": matmul,
        "transpose": unary(ad.transpose),
        "reshape": unary(lambda a: ad.reshape(a, (2, 6))),
        "concat": concat,
        "getitem": unary(lambda a: a[1:, ::2]),
        "softmax": unary(lambda a: ad.softmax(a, axis=-1)),
        "layer_norm": layer_norm,
        "bce_with_logits": bce,
        "conv2d": conv,
        "conv2d_transpose": conv_t,
        "cross_attention": attention,
    }
    suites = {name: make(name, fn) for name, fn in specs.items()}
    # clip has kinks at +-0.5; keep samples off them
    suites["clip"] = make("clip", unary(lambda a: ad.clip(a, -0.5, 0.5), lo=-0.45, hi=0.45))
    return suites


def render_suite(seed: int = 0, prims: int = 6, size: int = 16) -> GradCheckReport:
    """Full rasterizer backward (projection + compositing) on a small random scene."""
    from . import autodiff as ad
    from .camera import Camera
    from .rasterizer import render_tensor

    rng = np.random.default_rng(seed)
    cam = Camera.look_at((0.0, -3.0, 0.4), fov_deg=40.0, width=size, height=size)
    q = rng.normal(size=(prims, 4))
    params = [
        tensor_param(rng.uniform(-0.35, 0.35, size=(prims, 3)), "means"),
        tensor_param(rng.uniform(-2.0, -1.2, size=(prims, 3)), "log_scales"),
        tensor_param(q / np.linalg.norm(q, axis=1, keepdims=True), "quats"),
        tensor_param(rng.uniform(-1.0, 2.0, size=prims), "opacity_logits"),
        tensor_param(rng.uniform(0.1, 0.9, size=(prims, 3)), "colors"),
    ]
    w = rng.normal(size=(size, size, 3))
    bg = np.array([1.0, 1.0, 1.0])

    def f():
        return ad.sum(ad.mul(render_tensor(*params, bg, cam, tile_size=8), w))

    return grad_check(f, params)


def all_suites(seed: int = 0) -> dict:
    suites = op_suites(seed)
    suites["render"] = lambda: render_suite(seed)
    return suites
