"""Differentiable Gaussian-splat rasterization.

Two forward paths share the projection step:

* :func:`render` composites every pixel against the globally depth-sorted
  primitive list (vectorized numpy, used as the reference path);
* :func:`tile_render` bins primitives into screen tiles and composites each
  tile against its own candidate list (numba kernels, the training path).

Both apply the same cutoffs, so a primitive outside a pixel's 3-sigma
ellipse contributes nothing on either path. All internal math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .autodiff import NonFiniteError, Tensor, custom_op
from .camera import Camera
from .scene import SCALE_MAX, SCALE_MIN, GaussianScene

ALPHA_MAX = 0.99
CUTOFF_SIGMA = 3.0
DILATION = 0.3
MIN_DET = 1e-12
TILE_SIZES = (8, 16, 32)


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) accumulated opacity


@dataclass
class Projection:
    """Screen-space footprint of every primitive for one camera."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) inverse covariance entries (a, b, c)
    depth: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool
    # saved for the backward pass
    cam_points: np.ndarray
    rot: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    scale: np.ndarray
    scale_live: np.ndarray
    jw: np.ndarray
    sigma3d: np.ndarray


def quat_to_rotmat(qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def project(means, log_scales, quats, opacity_logits, cam: Camera) -> Projection:
    """Project 3-D Gaussians to screen-space 2-D Gaussians.

    Covariance: ``J W R S S^T R^T W^T J^T + 0.3 I`` with ``J`` the
    perspective Jacobian at the center. Primitives outside ``(near, far)``
    or with a degenerate footprint are marked invisible.
    """
    x = np.asarray(means, dtype=np.float64)
    n = len(x)
    p = x @ cam.rotation.T + cam.translation
    z = p[:, 2]
    in_range = (z > cam.near) & (z < cam.far)
    zs = np.where(in_range, z, 1.0)
    mean2d = np.stack([cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy], -1)

    q = np.asarray(quats, dtype=np.float64)
    qnorm = np.linalg.norm(q, axis=1)
    qnorm_safe = np.where(qnorm > 0, qnorm, 1.0)
    qn = q / qnorm_safe[:, None]
    qn[qnorm == 0] = (1.0, 0.0, 0.0, 0.0)
    rot = quat_to_rotmat(qn)
    raw_scale = np.exp(np.asarray(log_scales, dtype=np.float64))
    scale = np.clip(raw_scale, SCALE_MIN, SCALE_MAX)
    scale_live = (raw_scale >= SCALE_MIN) & (raw_scale <= SCALE_MAX)
    m = rot * scale[:, None, :]
    sigma3d = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * p[:, 0] / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * p[:, 1] / (zs * zs)
    jw = jac @ cam.rotation
    cov = jw @ sigma3d @ np.swapaxes(jw, 1, 2)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    visible = in_range & (det >= MIN_DET)
    det_s = np.where(visible, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / det_s, -cov[:, 0, 1] / det_s, cov[:, 0, 0] / det_s], -1)
    opacity = 1.0 / (1.0 + np.exp(-np.asarray(opacity_logits, dtype=np.float64)))
    return Projection(mean2d, cov, conic, np.where(in_range, z, np.inf), opacity, visible,
                      p, rot, qn, qnorm_safe, scale, scale_live, jw, sigma3d)


def project_gaussian(prim, cam: Camera) -> Optional[dict]:
    """Single-primitive projection; ``None`` when the primitive is culled.

    ``prim`` is a mapping with keys ``mean``, ``log_scale``, ``quat`` and
    ``opacity_logit``.
    """
    pr = project(np.reshape(prim["mean"], (1, 3)), np.reshape(prim["log_scale"], (1, 3)),
                 np.reshape(prim["quat"], (1, 4)), np.reshape(prim.get("opacity_logit", 0.0), (1,)), cam)
    if not pr.visible[0]:
        return None
    return {"mean2d": pr.mean2d[0], "cov2d": pr.cov2d[0], "depth": float(pr.depth[0])}


def depth_order(proj: Projection) -> np.ndarray:
    """Visible primitive indices, nearest first; ties broken by index."""
    idx = np.nonzero(proj.visible)[0]
    return idx[np.argsort(proj.depth[idx], kind="stable")]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{what} ({bad} non-finite values)")


# ---------------------------------------------------------------- reference path


def render(scene: GaussianScene, cam: Camera, chunk: int = 4096) -> RenderedImage:
    """Reference renderer: every pixel composites the global depth order."""
    dtype = scene.means.dtype if len(scene) else scene.background.dtype
    proj = project(scene.means, scene.log_scales, scene.quats, scene.opacity_logits, cam)
    order = depth_order(proj)
    bg = scene.background.astype(np.float64)
    h, w = cam.height, cam.width
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    px, py = jj.ravel(), ii.ravel()
    out = np.empty((h * w, 3))
    trans = np.empty(h * w)
    mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
    ca, cb, cc = proj.conic[order, 0], proj.conic[order, 1], proj.conic[order, 2]
    op = proj.opacity[order]
    col = scene.colors[order].astype(np.float64)
    lim = -0.5 * CUTOFF_SIGMA ** 2
    for s in range(0, h * w, chunk):
        dx = px[s:s + chunk, None] - mx[None]
        dy = py[s:s + chunk, None] - my[None]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        alpha = np.where(power >= lim, np.minimum(ALPHA_MAX, op * np.exp(np.minimum(power, 0.0))), 0.0)
        one_minus = 1.0 - alpha
        t_incl = np.cumprod(one_minus, axis=1)
        t_excl = np.concatenate([np.ones((len(dx), 1)), t_incl[:, :-1]], axis=1)
        wts = alpha * t_excl
        t_fin = t_incl[:, -1] if len(order) else np.ones(len(dx))
        out[s:s + chunk] = wts @ col + t_fin[:, None] * bg
        trans[s:s + chunk] = t_fin
    _check_finite(out, "render")
    return RenderedImage(out.reshape(h, w, 3).astype(dtype), (1.0 - trans).reshape(h, w).astype(dtype))


# ---------------------------------------------------------------- tile path


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray  # (tiles + 1,) offsets into prims
    prims: np.ndarray  # primitive index per (tile, primitive) pair, depth-ordered within tile


def pixel_rect(proj: Projection, order: np.ndarray, width: int, height: int):
    """Inclusive pixel-index bounds of each primitive's 3-sigma ellipse."""
    rx = CUTOFF_SIGMA * np.sqrt(proj.cov2d[order, 0, 0])
    ry = CUTOFF_SIGMA * np.sqrt(proj.cov2d[order, 1, 1])
    mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
    # pixel j is covered when |j + 0.5 - mx| <= rx; widen by one pixel for rounding safety
    j0 = np.clip(np.ceil(mx - rx - 0.5) - 1, 0, width - 1)
    j1 = np.clip(np.floor(mx + rx - 0.5) + 1, -1, width - 1)
    i0 = np.clip(np.ceil(my - ry - 0.5) - 1, 0, height - 1)
    i1 = np.clip(np.floor(my + ry - 0.5) + 1, -1, height - 1)
    ok = (mx + rx + 1 >= 0) & (mx - rx - 1 <= width) & (my + ry + 1 >= 0) & (my - ry - 1 <= height) & (j1 >= j0) & (i1 >= i0)
    return j0.astype(np.int64), j1.astype(np.int64), i0.astype(np.int64), i1.astype(np.int64), ok


def bin_tiles(proj: Projection, width: int, height: int, tile_size: int) -> TileBins:
    if tile_size not in TILE_SIZES:
        raise ValueError(f"tile_size must be one of {TILE_SIZES}")
    order = depth_order(proj)
    ntx = -(-width // tile_size)
    nty = -(-height // tile_size)
    j0, j1, i0, i1, ok = pixel_rect(proj, order, width, height)
    order, j0, j1, i0, i1 = order[ok], j0[ok], j1[ok], i0[ok], i1[ok]
    tx0, tx1 = j0 // tile_size, j1 // tile_size
    ty0, ty1 = i0 // tile_size, i1 // tile_size
    wx = tx1 - tx0 + 1
    counts = wx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[owner] + local % wx[owner]
    ty = ty0[owner] + local // wx[owner]
    tile_id = ty * ntx + tx
    srt = np.argsort(tile_id, kind="stable")
    prims = order[owner[srt]]
    ranges = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntx * nty), out=ranges[1:])
    return TileBins(tile_size, ntx, nty, ranges, prims.astype(np.int64))


@numba.njit(cache=True, fastmath=False)
def _raster_forward(ranges, prims, mean2d, conic, opacity, colors, bg, width, height, ts, ntx,
                    out, trans):
    lim = -0.5 * 9.0
    ntiles = len(ranges) - 1
    for t in range(ntiles):
        ty, tx = t // ntx, t % ntx
        start, stop = ranges[t], ranges[t + 1]
        for i in range(ty * ts, min((ty + 1) * ts, height)):
            py = i + 0.5
            for j in range(tx * ts, min((tx + 1) * ts, width)):
                px = j + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(start, stop):
                    g = prims[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power < lim:
                        continue
                    if power > 0.0:
                        power = 0.0
                    a = opacity[g] * np.exp(power)
                    if a > 0.99:
                        a = 0.99
                    wgt = a * T
                    c0 += wgt * colors[g, 0]
                    c1 += wgt * colors[g, 1]
                    c2 += wgt * colors[g, 2]
                    T = T * (1.0 - a)
                out[i, j, 0] = c0 + T * bg[0]
                out[i, j, 1] = c1 + T * bg[1]
                out[i, j, 2] = c2 + T * bg[2]
                trans[i, j] = T


@numba.njit(cache=True, fastmath=False)
def _raster_backward(ranges, prims, mean2d, conic, opacity, colors, bg, width, height, ts, ntx,
                     gout, d_mean, d_conic, d_opac, d_color, d_bg):
    lim = -0.5 * 9.0
    ntiles = len(ranges) - 1
    maxlen = 0
    for t in range(ntiles):
        maxlen = max(maxlen, ranges[t + 1] - ranges[t])
    s_idx = np.empty(maxlen, dtype=np.int64)
    s_alpha = np.empty(maxlen)
    s_T = np.empty(maxlen)
    s_pow = np.empty(maxlen)
    s_clamped = np.empty(maxlen, dtype=np.bool_)
    for t in range(ntiles):
        ty, tx = t // ntx, t % ntx
        start, stop = ranges[t], ranges[t + 1]
        for i in range(ty * ts, min((ty + 1) * ts, height)):
            py = i + 0.5
            for j in range(tx * ts, min((tx + 1) * ts, width)):
                px = j + 0.5
                g0, g1, g2 = gout[i, j, 0], gout[i, j, 1], gout[i, j, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                T = 1.0
                cnt = 0
                for k in range(start, stop):
                    g = prims[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power < lim:
                        continue
                    if power > 0.0:
                        power = 0.0
                    a = opacity[g] * np.exp(power)
                    clamped = False
                    if a > 0.99:
                        a = 0.99
                        clamped = True
                    s_idx[cnt] = g
                    s_alpha[cnt] = a
                    s_T[cnt] = T
                    s_pow[cnt] = power
                    s_clamped[cnt] = clamped
                    cnt += 1
                    T = T * (1.0 - a)
                d_bg[0] += T * g0
                d_bg[1] += T * g1
                d_bg[2] += T * g2
                acc = T * (bg[0] * g0 + bg[1] * g1 + bg[2] * g2)
                for r in range(cnt - 1, -1, -1):
                    g = s_idx[r]
                    a = s_alpha[r]
                    Tk = s_T[r]
                    wgt = a * Tk
                    d_color[g, 0] += wgt * g0
                    d_color[g, 1] += wgt * g1
                    d_color[g, 2] += wgt * g2
                    cg = colors[g, 0] * g0 + colors[g, 1] * g1 + colors[g, 2] * g2
                    d_alpha = Tk * cg - acc / (1.0 - a)
                    acc += wgt * cg
                    if s_clamped[r]:
                        continue
                    e = np.exp(s_pow[r])
                    d_opac[g] += d_alpha * e
                    d_pow = d_alpha * a
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    d_mean[g, 0] += d_pow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    d_mean[g, 1] += d_pow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    d_conic[g, 0] += -0.5 * dx * dx * d_pow
                    d_conic[g, 1] += -dx * dy * d_pow
                    d_conic[g, 2] += -0.5 * dy * dy * d_pow


class RasterState:
    """Forward state kept for the backward pass of one render."""

    def __init__(self, scene_arrays, background, cam: Camera, tile_size: int):
        means, log_scales, quats, opacity_logits, colors = scene_arrays
        self.cam = cam
        self.n = len(means)
        self.proj = project(means, log_scales, quats, opacity_logits, cam)
        self.bins = bin_tiles(self.proj, cam.width, cam.height, tile_size)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64)
        self.background = np.asarray(background, dtype=np.float64)

    def forward(self):
        cam, b = self.cam, self.bins
        out = np.empty((cam.height, cam.width, 3))
        trans = np.empty((cam.height, cam.width))
        _raster_forward(b.ranges, b.prims, np.ascontiguousarray(self.proj.mean2d),
                        np.ascontiguousarray(self.proj.conic), self.proj.opacity, self.colors,
                        self.background, cam.width, cam.height, b.tile_size, b.tiles_x, out, trans)
        _check_finite(out, "tile_render")
        return out, trans

    def backward(self, upstream: np.ndarray) -> dict:
        cam, b, pr = self.cam, self.bins, self.proj
        n = self.n
        d_mean2d = np.zeros((n, 2))
        d_conic = np.zeros((n, 3))
        d_opac = np.zeros(n)
        d_color = np.zeros((n, 3))
        d_bg = np.zeros(3)
        g = np.ascontiguousarray(upstream, dtype=np.float64).reshape(cam.height, cam.width, 3)
        _raster_backward(b.ranges, b.prims, np.ascontiguousarray(pr.mean2d), np.ascontiguousarray(pr.conic),
                         pr.opacity, self.colors, self.background, cam.width, cam.height, b.tile_size,
                         b.tiles_x, g, d_mean2d, d_conic, d_opac, d_color, d_bg)
        grads = projection_backward(pr, cam, d_mean2d, d_conic)
        grads["opacity_logits"] = d_opac * pr.opacity * (1.0 - pr.opacity)
        grads["colors"] = d_color
        grads["background"] = d_bg
        for k, v in grads.items():
            _check_finite(v, f"render_backward:{k}")
        return grads


def _rot_derivs(qn: np.ndarray) -> np.ndarray:
    """dR/dq for normalized quaternions, shape (N, 4, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([np.stack([zero, -2 * z, 2 * y], -1),
                   np.stack([2 * z, zero, -2 * x], -1),
                   np.stack([-2 * y, 2 * x, zero], -1)], -2)
    dx = np.stack([np.stack([zero, 2 * y, 2 * z], -1),
                   np.stack([2 * y, -4 * x, -2 * w], -1),
                   np.stack([2 * z, 2 * w, -4 * x], -1)], -2)
    dy = np.stack([np.stack([-4 * y, 2 * x, 2 * w], -1),
                   np.stack([2 * x, zero, 2 * z], -1),
                   np.stack([-2 * w, 2 * z, -4 * y], -1)], -2)
    dz = np.stack([np.stack([-4 * z, -2 * w, 2 * x], -1),
                   np.stack([2 * w, -4 * z, 2 * y], -1),
                   np.stack([2 * x, 2 * y, zero], -1)], -2)
    return np.stack([dw, dx, dy, dz], 1)


def projection_backward(pr: Projection, cam: Camera, d_mean2d: np.ndarray, d_conic: np.ndarray) -> dict:
    """Chain screen-space gradients back to center, log-scale and quaternion."""
    vis = pr.visible
    n = len(vis)
    # conic = inverse(cov); treat conic (a, b, c) as matrix [[a, b], [b, c]]
    k = np.zeros((n, 2, 2))
    k[:, 0, 0], k[:, 0, 1], k[:, 1, 0], k[:, 1, 1] = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 1], pr.conic[:, 2]
    gk = np.zeros((n, 2, 2))
    gk[:, 0, 0] = d_conic[:, 0]
    gk[:, 0, 1] = gk[:, 1, 0] = 0.5 * d_conic[:, 1]
    gk[:, 1, 1] = d_conic[:, 2]
    g_cov = -k @ gk @ k

    jw, sigma = pr.jw, pr.sigma3d
    g_sigma = np.swapaxes(jw, 1, 2) @ g_cov @ jw
    g_jw = 2.0 * g_cov @ jw @ sigma
    g_jac = g_jw @ cam.rotation.T

    p = pr.cam_points
    z = np.where(vis, p[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_p = np.zeros((n, 3))
    # mean2d = (fx px / z + cx, fy py / z + cy)
    g_p[:, 0] += d_mean2d[:, 0] * fx / z
    g_p[:, 1] += d_mean2d[:, 1] * fy / z
    g_p[:, 2] += -d_mean2d[:, 0] * fx * p[:, 0] / z ** 2 - d_mean2d[:, 1] * fy * p[:, 1] / z ** 2
    # J = [[fx/z, 0, -fx px/z^2], [0, fy/z, -fy py/z^2]]
    g_p[:, 0] += -g_jac[:, 0, 2] * fx / z ** 2
    g_p[:, 1] += -g_jac[:, 1, 2] * fy / z ** 2
    g_p[:, 2] += (-g_jac[:, 0, 0] * fx / z ** 2 + g_jac[:, 0, 2] * 2 * fx * p[:, 0] / z ** 3
                  - g_jac[:, 1, 1] * fy / z ** 2 + g_jac[:, 1, 2] * 2 * fy * p[:, 1] / z ** 3)
    g_means = g_p @ cam.rotation

    # sigma = M M^T, M = R diag(scale)
    m = pr.rot * pr.scale[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_scale = np.einsum("nij,nij->nj", g_m, pr.rot)
    g_log_scale = g_scale * pr.scale * pr.scale_live
    g_rot = g_m * pr.scale[:, None, :]
    g_qn = np.einsum("nij,nkij->nk", g_rot, _rot_derivs(pr.qn))
    g_q = (g_qn - pr.qn * np.sum(pr.qn * g_qn, axis=1, keepdims=True)) / pr.qnorm[:, None]

    mask = vis[:, None].astype(np.float64)
    return {"means": g_means * mask, "log_scales": g_log_scale * mask, "quats": g_q * mask}


def tile_render(scene: GaussianScene, cam: Camera, tile_size: int = 16) -> RenderedImage:
    """Tiled renderer; matches :func:`render` to float rounding."""
    dtype = scene.means.dtype if len(scene) else scene.background.dtype
    st = RasterState(scene.arrays(), scene.background, cam, tile_size)
    out, trans = st.forward()
    return RenderedImage(out.astype(dtype), (1.0 - trans).astype(dtype))


def render_backward(scene: GaussianScene, cam: Camera, upstream: np.ndarray, tile_size: int = 16,
                    state: Optional[RasterState] = None) -> dict:
    """Gradients of ``sum(upstream * render(scene, cam))`` for every scene field."""
    if upstream is None:
        raise ValueError("render_backward needs an upstream gradient")
    up = np.asarray(upstream)
    if up.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {up.shape} != {(cam.height, cam.width, 3)}")
    st = state or RasterState(scene.arrays(), scene.background, cam, tile_size)
    grads = st.backward(up)
    dtype = scene.means.dtype
    return {k: v.astype(dtype) for k, v in grads.items()}


def render_tensor(means: Tensor, log_scales: Tensor, quats: Tensor, opacity_logits: Tensor,
                  colors: Tensor, background, cam: Camera, tile_size: int = 16) -> Tensor:
    """Tape op: render (H, W, 3) from per-field primitive tensors."""
    inputs = (means, log_scales, quats, opacity_logits, colors)
    st = RasterState(tuple(t.data for t in inputs), background, cam, tile_size)
    out, _ = st.forward()
    dtype = means.dtype

    def backward(g):
        grads = st.backward(g)
        return tuple(grads[k].astype(dtype) for k in ("means", "log_scales", "quats", "opacity_logits", "colors"))

    return custom_op("render", inputs, out.astype(dtype), backward)
