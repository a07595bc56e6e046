"""Procedural base scenes and payloads."""

from __future__ import annotations

import numpy as np

from .camera import fibonacci_directions
from .scene import GaussianScene

SHAPES = ("sphere", "torus", "box")


def _quat_from_z_to(normals: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) rotating +z onto each unit normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    dot = normals @ z
    q = np.concatenate([(1.0 + dot)[:, None], axis], axis=1)
    flip = dot < -1 + 1e-9
    q[flip] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _texture(points: np.ndarray, rng: np.random.Generator, waves: int = 10) -> np.ndarray:
    freqs = rng.normal(0.0, 2.5, size=(3, waves, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(3, waves))
    amps = rng.uniform(0.3, 1.0, size=(3, waves)) / np.sqrt(waves)
    out = np.empty((len(points), 3))
    for ch in range(3):
        field = np.sin(points @ freqs[ch].T + phases[ch]) @ amps[ch]
        out[:, ch] = 0.5 + 0.4 * np.tanh(1.5 * field)
    return out


def synth_scene(shape: str = "sphere", prim_count: int = 2000, texture_seed: int = 0,
                background=(1.0, 1.0, 1.0), opacity: float = 0.9) -> GaussianScene:
    """Flat Gaussians tiled over a closed surface with a seeded color texture."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if prim_count <= 0:
        raise ValueError("prim_count must be positive")
    rng = np.random.default_rng(texture_seed)
    n = prim_count
    if shape == "sphere":
        radius = 1.0
        normals = fibonacci_directions(n)
        points = radius * normals
        area = 4 * np.pi * radius ** 2
    elif shape == "torus":
        big, small = 1.0, 0.4
        # golden-ratio lattice on the (u, v) square
        i = np.arange(n) + 0.5
        u = 2 * np.pi * i / n
        v = 2 * np.pi * ((i * (np.sqrt(5) - 1) / 2) % 1.0)
        ring = np.stack([np.cos(u), np.sin(u), np.zeros(n)], 1)
        normals = np.cos(v)[:, None] * ring + np.sin(v)[:, None] * np.array([0.0, 0.0, 1.0])
        points = big * ring + small * normals
        area = 4 * np.pi ** 2 * big * small
    else:
        half = 0.8
        dirs = rng.normal(size=(n, 3))
        face_axis = np.argmax(np.abs(dirs), axis=1)
        sign = np.sign(dirs[np.arange(n), face_axis])
        points = rng.uniform(-half, half, size=(n, 3))
        points[np.arange(n), face_axis] = sign * half
        normals = np.zeros((n, 3))
        normals[np.arange(n), face_axis] = sign
        area = 6 * (2 * half) ** 2
    spacing = np.sqrt(area / n)
    tangential = 0.6 * spacing
    log_scales = np.log(np.tile([tangential, tangential, 0.15 * tangential], (n, 1)))
    quats = _quat_from_z_to(normals)
    logit = np.log(opacity / (1 - opacity))
    colors = _texture(points, rng)
    f = np.float32
    return GaussianScene(points.astype(f), log_scales.astype(f), quats.astype(f),
                         np.full(n, logit, dtype=f), colors.astype(f), np.asarray(background, dtype=f))


def emoji_image(size: int = 64, seed: int = 0) -> np.ndarray:
    """A procedural smiley-style icon, (size, size, 3) floats in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size * 2 - 1
    v = (yy + 0.5) / size * 2 - 1

    def soft(d, width=1.5 / size):
        return np.clip(0.5 - d / (2 * width), 0.0, 1.0)

    bg = rng.uniform(0.05, 0.35, 3)
    face = np.array([1.0, 0.8, 0.15]) * rng.uniform(0.85, 1.0) + rng.uniform(-0.1, 0.1, 3)
    feature = rng.uniform(0.0, 0.3, 3)
    accent = rng.uniform(0.4, 1.0, 3)
    img = np.ones((size, size, 3)) * bg
    r_face = rng.uniform(0.78, 0.9)
    m = soft(np.hypot(u, v) - r_face)[..., None]
    img = img * (1 - m) + face * m
    ex, ey, er = rng.uniform(0.25, 0.38), rng.uniform(-0.35, -0.2), rng.uniform(0.08, 0.14)
    for sx in (-1, 1):
        m = soft(np.hypot((u - sx * ex) / 0.8, v - ey) - er)[..., None]
        img = img * (1 - m) + feature * m
    # mouth: lower arc of a ring
    mr, mw = rng.uniform(0.4, 0.55), rng.uniform(0.06, 0.1)
    d = np.abs(np.hypot(u, v + 0.05) - mr) - mw
    m = (soft(d) * (v > 0.1))[..., None]
    img = img * (1 - m) + feature * m
    # cheeks
    for sx in (-1, 1):
        m = 0.6 * soft(np.hypot(u - sx * 0.5, v - 0.2) - 0.1)[..., None]
        img = img * (1 - m) + accent * m
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def pattern_image(size: int = 64, seed: int = 0, waves: int = 6) -> np.ndarray:
    """Colorful interference pattern with strong local contrast everywhere."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size
    v = (yy + 0.5) / size
    img = np.empty((size, size, 3))
    for ch in range(3):
        freq = rng.uniform(2.0, 6.0, waves)
        theta = rng.uniform(0, np.pi, waves)
        phase = rng.uniform(0, 2 * np.pi, waves)
        field = sum(np.sin(2 * np.pi * f * (u * np.cos(t) + v * np.sin(t)) + p)
                    for f, t, p in zip(freq, theta, phase))
        img[..., ch] = 0.5 + 0.5 * np.tanh(1.2 * field / np.sqrt(waves) * 2)
    return img.astype(np.float32)


def random_bits(length: int = 64, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=length).astype(np.uint8)
