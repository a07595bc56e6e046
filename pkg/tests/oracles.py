"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, textbook formulas) and share
no code with the package beyond plain data containers.
"""

from __future__ import annotations

import math

import numpy as np

ALPHA_MAX = 0.99
CUTOFF_POWER = -0.5 * 3.0 ** 2
DILATION = 0.3


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_one(mean, log_scale, quat, cam):
    """Pinhole projection of one Gaussian; None when outside (near, far)."""
    p = cam.rotation @ np.asarray(mean, dtype=np.float64) + cam.translation
    if not cam.near < p[2] < cam.far:
        return None
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    s = np.clip(np.exp(np.asarray(log_scale, dtype=np.float64)), 1e-6, 1e3)
    r = quat_matrix(quat)
    sigma = r @ np.diag(s * s) @ r.T
    j = np.array([[cam.fx / p[2], 0, -cam.fx * p[0] / p[2] ** 2],
                  [0, cam.fy / p[2], -cam.fy * p[1] / p[2] ** 2]])
    t = j @ cam.rotation
    cov = t @ sigma @ t.T + DILATION * np.eye(2)
    return np.array([u, v]), cov, p[2]


def composite(scene, cam):
    """Per-pixel front-to-back compositing over the globally sorted list.

    Returns ``(image, weights)`` where ``weights[i, j]`` is the list of
    per-primitive blending weights plus the final transmittance.
    """
    prims = []
    for k in range(len(scene)):
        pr = project_one(scene.means[k], scene.log_scales[k], scene.quats[k], cam)
        if pr is None:
            continue
        mean2d, cov, depth = pr
        opac = 1.0 / (1.0 + math.exp(-float(scene.opacity_logits[k])))
        prims.append((depth, k, mean2d, np.linalg.inv(cov), opac, scene.colors[k].astype(np.float64)))
    prims.sort(key=lambda t: (t[0], t[1]))
    bg = scene.background.astype(np.float64)
    img = np.zeros((cam.height, cam.width, 3))
    weights = {}
    for i in range(cam.height):
        for j in range(cam.width):
            x = np.array([j + 0.5, i + 0.5])
            trans = 1.0
            acc = np.zeros(3)
            ws = []
            for _, _, mean2d, inv, opac, col in prims:
                d = x - mean2d
                power = -0.5 * float(d @ inv @ d)
                if power < CUTOFF_POWER:
                    continue
                a = min(ALPHA_MAX, opac * math.exp(power))
                acc += trans * a * col
                ws.append(trans * a)
                trans *= 1.0 - a
            img[i, j] = acc + trans * bg
            weights[(i, j)] = ws + [trans]
    return img, weights


def conv2d_direct(x, w, b=None, stride=1, padding=0):
    """Cross-correlation by the defining sum; x (N,C,H,W), w (O,C,k,k)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                s += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = s + (b[oc] if b is not None else 0.0)
    return out


def attention_dense(q, k, v):
    """Row-wise softmax(q k^T / sqrt(d)) v with explicit loops."""
    n, d = q.shape
    t = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = [float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(t)]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        z = sum(e)
        for j in range(t):
            out[i] += (e[j] / z) * v[j]
    return out


def psnr_loop(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))


def ssim_windowed(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03, luma=(0.299, 0.587, 0.114)):
    """Mean SSIM over every full 11x11 Gaussian window of the luma channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a = a @ np.asarray(luma)
        b = b @ np.asarray(luma)
    r = win // 2
    g1 = np.array([math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(win)])
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * pa * pa).sum() - ma * ma
            vb = (g * pb * pb).sum() - mb * mb
            cov = (g * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def dct2_block(block):
    """Orthonormal 8x8 type-II DCT by the cosine-sum definition."""
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            cu = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            cv = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
            s = 0.0
            for x in range(n):
                for y in range(n):
                    s += block[x, y] * math.cos((2 * x + 1) * u * math.pi / (2 * n)) * \
                        math.cos((2 * y + 1) * v * math.pi / (2 * n))
            out[u, v] = cu * cv * s
    return out


def idct2_block(coef):
    n = coef.shape[0]
    out = np.zeros((n, n))
    for x in range(n):
        for y in range(n):
            s = 0.0
            for u in range(n):
                for v in range(n):
                    cu = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
                    cv = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
                    s += cu * cv * coef[u, v] * math.cos((2 * x + 1) * u * math.pi / (2 * n)) * \
                        math.cos((2 * y + 1) * v * math.pi / (2 * n))
            out[x, y] = s
    return out


def libjpeg_table(base, quality):
    q = int(quality)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip([[(int(v) * scale + 50) // 100 for v in row] for row in base], 1, 255)
