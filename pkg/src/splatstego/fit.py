"""Fixed-count Gaussian fit to posed multi-view images (L1 photometric descent)."""

from __future__ import annotations

import json
import logging
import os
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .camera import Camera
from .optim import ParamStore, adamw_step
from .rasterizer import render_tensor
from .scene import GaussianScene

log = logging.getLogger(__name__)

FIELD_LR = {"means": 0.01, "log_scales": 0.02, "quats": 0.01, "opacity": 0.05, "colors": 0.05}


class FitError(ValueError):
    pass


def in_frustum(points: np.ndarray, cam: Camera, margin: float = 0.0) -> np.ndarray:
    p = cam.world_to_camera(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    m = margin
    return ((z > cam.near) & (z < cam.far) & (u >= m * cam.width) & (u <= (1 - m) * cam.width)
            & (v >= m * cam.height) & (v <= (1 - m) * cam.height))


def sample_in_hull(cameras: Sequence[Camera], n: int, rng: np.random.Generator, batch: int = 4096,
                   max_rounds: int = 200) -> np.ndarray:
    """Uniform points inside the intersection of all view frusta.

    The proposal box spans the camera centers; if the intersection is too
    thin to fill, points seen by at least half of the cameras are accepted.
    """
    centers = np.array([c.center for c in cameras])
    lo, hi = centers.min(0), centers.max(0)
    if np.any(hi - lo < 1e-6):
        span = max(float(np.ptp(centers, axis=0).max()), 1.0)
        lo, hi = centers.mean(0) - span, centers.mean(0) + span
    need = len(cameras)
    for attempt in (need, max(1, (need + 1) // 2)):
        out = []
        got = 0
        for _ in range(max_rounds):
            pts = rng.uniform(lo, hi, size=(batch, 3))
            seen = np.sum([in_frustum(pts, c, 0.1) for c in cameras], axis=0)
            keep = pts[seen >= attempt]
            out.append(keep)
            got += len(keep)
            if got >= n:
                return np.concatenate(out)[:n]
    raise FitError("camera frusta do not overlap; cannot place primitives")


def init_scene(cameras: Sequence[Camera], prim_count: int, seed: int = 0,
               background=(1.0, 1.0, 1.0)) -> GaussianScene:
    """Random isotropic primitives inside the frustum hull, mid-gray, half opaque."""
    if prim_count <= 0:
        raise FitError("prim_count must be positive")
    rng = np.random.default_rng(seed)
    means = sample_in_hull(cameras, prim_count, rng)
    extent = float(np.linalg.norm(np.ptp(means, axis=0))) or 1.0
    s = np.log(extent / (2.0 * np.cbrt(prim_count)))
    q = rng.normal(size=(prim_count, 4))
    return GaussianScene(means.astype(np.float32), np.full((prim_count, 3), s, np.float32),
                         (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32),
                         np.zeros(prim_count, np.float32), np.full((prim_count, 3), 0.5, np.float32),
                         np.asarray(background, np.float32))


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-4, 1 - 1e-4)
    return np.log(p / (1 - p))


def fit_scene(images: Sequence[np.ndarray], cameras: Sequence[Camera], prim_count: int, steps: int,
              seed: int = 0, views_per_step: int = 4, background=(1.0, 1.0, 1.0), tile_size: int = 16,
              init: Optional[GaussianScene] = None,
              on_step: Optional[Callable[[int, float], None]] = None) -> GaussianScene:
    """Fit ``prim_count`` Gaussians to the posed images; no densification.

    Colors are optimized through a sigmoid so they stay in [0, 1].
    ``steps = 0`` returns the initialization unchanged.
    """
    if len(images) != len(cameras):
        raise FitError(f"{len(images)} images but {len(cameras)} cameras")
    if not images:
        raise FitError("need at least one posed image")
    for img, cam in zip(images, cameras):
        if np.shape(img)[:2] != (cam.height, cam.width):
            raise FitError(f"image {np.shape(img)} does not match camera {cam.height}x{cam.width}")
    if steps < 0:
        raise FitError("steps must be >= 0")
    scene = init if init is not None else init_scene(cameras, prim_count, seed, background)
    if steps == 0:
        return scene
    store = ParamStore()
    store.add("means", "theta", scene.means.astype(np.float32))
    store.add("log_scales", "theta", scene.log_scales.astype(np.float32))
    store.add("quats", "theta", scene.quats.astype(np.float32))
    store.add("opacity", "theta", scene.opacity_logits.astype(np.float32))
    store.add("colors", "theta", _logit(scene.colors).astype(np.float32))
    targets = [np.asarray(im, dtype=np.float32)[..., :3] for im in images]
    bg = np.asarray(scene.background, dtype=np.float32)
    rng = np.random.default_rng(seed + 1)
    k = min(views_per_step, len(cameras))
    names = store.names()
    for step in range(steps):
        views = rng.choice(len(cameras), size=k, replace=False)
        with Tape() as tape:
            cols = ad.sigmoid(store["colors"])
            loss = None
            for i in views:
                r = render_tensor(store["means"], store["log_scales"], store["quats"], store["opacity"], cols,
                                  bg, cameras[int(i)], tile_size)
                term = ad.mean(ad.abs(ad.sub(r, targets[int(i)])))
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.scale(loss, 1.0 / k)
        store.set_grads(names, tape.gradient(loss, [store[n] for n in names]))
        for n in names:
            adamw_step(store, lr=FIELD_LR[n], weight_decay=0.0, names=[n])
        if on_step:
            on_step(step + 1, float(loss.data))
    colors = 1.0 / (1.0 + np.exp(-store["colors"].data.astype(np.float64)))
    return GaussianScene(store["means"].data.copy(), store["log_scales"].data.copy(), store["quats"].data.copy(),
                         store["opacity"].data.copy(), colors.astype(np.float32), bg.copy())


def load_posed_images(cameras_json, image_paths: Optional[Sequence[str]] = None):
    """Cameras from JSON plus PNGs.

    The JSON is either a list of camera dicts or ``{"cameras": [...],
    "images": [...]}`` with image paths relative to the JSON file. Explicit
    ``image_paths`` take precedence.
    """
    from .io.png import load_png

    with open(cameras_json) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FitError(f"{cameras_json}: invalid JSON ({exc})") from exc
    if isinstance(data, dict):
        cams_d = data.get("cameras", [])
        listed = [os.path.join(os.path.dirname(os.fspath(cameras_json)), p) for p in data.get("images", [])]
    else:
        cams_d, listed = data, []
    try:
        cameras = [Camera.from_dict(c) for c in cams_d]
    except (TypeError, ValueError) as exc:
        raise FitError(f"{cameras_json}: bad camera entry ({exc})") from exc
    paths = list(image_paths) if image_paths else listed
    if len(paths) != len(cameras):
        raise FitError(f"{len(paths)} images but {len(cameras)} cameras")
    return [load_png(p) for p in paths], cameras
