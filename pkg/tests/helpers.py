"""Shared scene/camera builders for tests."""

from __future__ import annotations

import numpy as np

from splatstego.camera import Camera
from splatstego.scene import GaussianScene


def small_camera(width=20, height=14, eye=(0.0, -3.0, 0.5), fov=45.0):
    return Camera.look_at(eye, fov_deg=fov, width=width, height=height, near=0.1, far=20.0)


def random_scene(rng, n, dtype=np.float64, spread=0.6, background=None):
    q = rng.normal(size=(n, 4))
    bg = rng.uniform(0, 1, 3) if background is None else background
    return GaussianScene(
        rng.uniform(-spread, spread, size=(n, 3)).astype(dtype),
        rng.uniform(-3.0, -1.2, size=(n, 3)).astype(dtype),
        (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(dtype),
        rng.uniform(-2.0, 4.0, size=n).astype(dtype),
        rng.uniform(0, 1, size=(n, 3)).astype(dtype),
        np.asarray(bg, dtype=dtype),
    )


TINY = ["scene.prim_count=60", "train.resolution=32", "model.hidden_resolution=16", "rig.cameras=6",
        "rig.heldout=2", "model.decoder_widths=[4, 8, 8]", "model.d=8", "model.hidden=16", "train.views_per_step=2"]


def tiny_config(*extra):
    from splatstego.config import Config, apply_overrides

    return apply_overrides(Config(), TINY + list(extra))
