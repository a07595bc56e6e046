"""Dense tensors with tape-based reverse-mode differentiation.

Every learned component of the package (generator, injector, decoder, scene
fitting) is built from the ops in this module. A :class:`Tape` records ops in
execution order while it is active; :meth:`Tape.gradient` replays the
recorded nodes in reverse. The forward state is kept, so several gradients
can be taken from one forward pass (harmonization needs two).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "AttentionConfig",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "precision",
    "default_dtype",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite output from op '{op}'")
        self.op = op


_DEFAULT_DTYPE = [np.dtype(np.float32)]
_ACTIVE_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """An immutable array value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str = "", dtype=None) -> Tensor:
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Records differentiable ops executed while the tape is active.

    Nodes are appended in execution order, so node ``k`` only depends on
    nodes with a smaller index.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _record(self, op, inputs, output, backward):
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list:
        """Gradients of ``target`` with respect to ``sources``.

        ``target`` must be a scalar unless an explicit ``seed`` (upstream
        gradient, same shape as target) is given. Sources that do not
        influence the target get zero gradients.
        """
        if seed is None:
            if target.data.size != 1:
                raise ShapeError("gradient of a non-scalar target needs a seed")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        start = target._node if target._node is not None else -1
        if start >= len(self.nodes) or (start >= 0 and self.nodes[start].output is not target):
            raise ValueError("target was not recorded on this tape")
        for k in range(start, -1, -1):
            node = self.nodes[k]
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return out


def _tracking(inputs) -> Optional[Tape]:
    if not _ACTIVE_TAPES:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return _ACTIVE_TAPES[-1]
    return None


def _finish(op: str, inputs, out: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    tape = _tracking(inputs)
    result = Tensor(out, requires_grad=tape is not None)
    if tape is not None:
        tape._record(op, inputs, result, backward)
    return result


def custom_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Register an externally computed op (e.g. the rasterizer) on the tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    return _finish(op, list(inputs), out, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _finish("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    k = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _finish("leaky_relu", (a,), a.data * k, lambda g: (g * k,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _finish("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish("exp", (a,), out, lambda g: (g * out,))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _finish("sin", (a,), np.sin(x), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _finish("cos", (a,), np.cos(x), lambda g: (-g * np.sin(x),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.sign(a.data)
    return _finish("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient strictly inside ``[lo, hi]``."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _finish("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", (a,), out, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", (a, b), ad @ bd, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _finish("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _finish("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _finish("concat", tensors, out, backward)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _finish("getitem", (a,), np.array(a.data[index]), backward)


# ---------------------------------------------------------------- nn ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", (a,), out, backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    x = a.data
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({x.shape[-1]},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _finish("layer_norm", (a, gamma, beta), out, backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stable form)."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: {z.shape} vs {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1 + np.tanh(0.5 * z))
    n = z.size

    def backward(g):
        return ((p - y) * (g / n),)

    return _finish("bce_with_logits", (logits,), np.asarray(loss.mean(), dtype=z.dtype), backward)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    # xp: (N, C, Hp, Wp) already padded -> cols (N*Ho*Wo, C*k*k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape_p: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape_p
    out = np.zeros(shape_p, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, k, k), b: (O,)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wmat, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _finish("conv2d", inputs, np.ascontiguousarray(out), backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. x: (N, C, H, W), w: (C, O, k, k), b: (O,).

    Output spatial size is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d_transpose: x {x.shape}, w {w.shape}")
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    p = padding
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    if hp - 2 * p <= 0 or wp - 2 * p <= 0:
        raise ShapeError("conv2d_transpose: padding too large")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, o * k * k)
    cols = xm @ wmat
    full = _col2im(cols, (n, o, hp, wp), k, stride, h, wd)
    out = full[:, :, p:hp - p, p:wp - p]
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols, _, _ = _im2col(gfull, k, stride)
        gx = (gcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _finish("conv2d_transpose", inputs, np.ascontiguousarray(out), backward)


@dataclass(frozen=True)
class AttentionConfig:
    d: int
    heads: int = 1

    def __post_init__(self):
        if self.d <= 0 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"invalid attention config d={self.d} heads={self.heads}")


def cross_attention(q: Tensor, k: Tensor, v: Tensor, cfg: Optional[AttentionConfig] = None) -> Tensor:
    """Scaled dot-product attention of query rows over key/value rows.

    Row i of the output is ``sum_j softmax_j(<q_i, k_j> / sqrt(d_head)) v_j``,
    i.e. the softmax runs over the key axis.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("cross_attention expects 2-D token matrices")
    d = q.shape[1]
    cfg = cfg or AttentionConfig(d)
    heads = cfg.heads
    if cfg.d != d or k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"cross_attention: widths {q.shape[1]}, {k.shape[1]}, {v.shape[1]} vs d={cfg.d}")
    if k.shape[0] == 0 or k.shape[0] != v.shape[0]:
        raise ShapeError("cross_attention: need T >= 1 keys with matching values")
    dh = d // heads
    outs = []
    for hidx in range(heads):
        sl = slice(hidx * dh, (hidx + 1) * dh)
        qh, kh, vh = (q[:, sl], k[:, sl], v[:, sl]) if heads > 1 else (q, k, v)
        logits = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dh))
        outs.append(matmul(softmax(logits, axis=-1), vh))
    return outs[0] if heads == 1 else concat(outs, axis=-1)
