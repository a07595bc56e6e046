import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatstego import autodiff as ad
from splatstego.autodiff import Tape, Tensor
from splatstego.camera import Camera, orbit_rig
from splatstego.rasterizer import (ALPHA_MAX, bin_tiles, depth_order, project, project_gaussian, render,
                                   render_backward, render_tensor, tile_render)
from splatstego.scene import GaussianScene
from splatstego.synth import synth_scene

from helpers import random_scene, small_camera
from oracles import composite


def axis_camera(size=16, f=20.0):
    return Camera(f, f, size / 2, size / 2, np.eye(3), np.zeros(3), size, size, 0.1, 50.0)


def one_prim(mean, log_scale=-2.0, logit=0.0, color=(1.0, 0.0, 0.0), bg=(0.0, 0.0, 1.0)):
    return GaussianScene(np.array([mean], float), np.full((1, 3), log_scale), np.array([[1.0, 0, 0, 0]]),
                         np.array([logit]), np.array([color]), np.array(bg, float))


def test_on_axis_projection():
    cam = axis_camera()
    out = project_gaussian({"mean": [0, 0, 4.0], "log_scale": [-2.0] * 3, "quat": [1, 0, 0, 0]}, cam)
    assert np.allclose(out["mean2d"], [cam.cx, cam.cy]) and out["depth"] == 4.0


def test_isotropic_on_axis_covariance():
    cam = axis_camera()
    s, z = -1.5, 3.0
    out = project_gaussian({"mean": [0, 0, z], "log_scale": [s] * 3, "quat": [1, 0, 0, 0]}, cam)
    expect = (cam.fx * np.exp(s) / z) ** 2 + 0.3
    assert np.allclose(out["cov2d"], expect * np.eye(2), rtol=1e-12)


def test_cull_before_near():
    cam = axis_camera()
    assert project_gaussian({"mean": [0, 0, 0.05], "log_scale": [-2.0] * 3, "quat": [1, 0, 0, 0]}, cam) is None
    assert project_gaussian({"mean": [0, 0, -1.0], "log_scale": [-2.0] * 3, "quat": [1, 0, 0, 0]}, cam) is None


def test_projection_matches_numeric_jacobian():
    """cov2d of a small Gaussian vs the numerically linearized projection."""
    rng = np.random.default_rng(5)
    cam = small_camera()
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    mean = np.array([0.2, -0.1, 0.3])
    ls = np.array([-2.5, -2.0, -3.0])
    pr = project(mean[None], ls[None], q[None], np.zeros(1), cam)

    def proj(x):
        p = cam.rotation @ x + cam.translation
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])

    h = 1e-6
    jac = np.stack([(proj(mean + h * e) - proj(mean - h * e)) / (2 * h) for e in np.eye(3)], 1)
    w, x, y, z = q
    rot = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    sigma = rot @ np.diag(np.exp(2 * ls)) @ rot.T
    assert np.allclose(pr.cov2d[0], jac @ sigma @ jac.T + 0.3 * np.eye(2), rtol=1e-6)


def test_empty_scene_is_background():
    img = render(GaussianScene.empty(), axis_camera())
    assert np.all(img.pixels == 1.0) and np.all(img.alpha == 0.0)
    assert np.all(tile_render(GaussianScene.empty(), axis_camera()).pixels == 1.0)


def test_single_primitive_over_pixel_center():
    cam = axis_camera()
    # pixel (8, 8) center is image point (8.5, 8.5)
    z = 4.0
    mean = [0.5 * z / cam.fx, 0.5 * z / cam.fy, z]
    logit = 0.3
    a = 1 / (1 + np.exp(-logit))
    scene = one_prim(mean, logit=logit)
    for img in (render(scene, cam), tile_render(scene, cam)):
        assert np.allclose(img.pixels[8, 8], a * np.array([1, 0, 0]) + (1 - a) * np.array([0, 0, 1]), atol=1e-12)


def test_two_overlapping_primitives_match_oracle():
    cam = axis_camera()
    scene = GaussianScene(np.array([[0.0, 0.0, 4.0], [0.05, 0.02, 5.0]]), np.full((2, 3), -1.5),
                          np.array([[1.0, 0, 0, 0]] * 2), np.array([0.5, 1.5]),
                          np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.ones(3))
    want, _ = composite(scene, cam)
    assert np.abs(render(scene, cam).pixels - want).max() < 1e-6
    assert np.abs(tile_render(scene, cam, 8).pixels - want).max() < 1e-6


@given(st.integers(1, 30), st.sampled_from([8, 16, 32]), st.integers(0, 2 ** 20))
def test_tile_render_equals_reference(n, tile, seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    cam = small_camera(23, 17)
    a, b = render(scene, cam), tile_render(scene, cam, tile)
    assert np.abs(a.pixels - b.pixels).max() < 1e-6
    assert np.abs(a.alpha - b.alpha).max() < 1e-6


def test_weights_and_transmittance_sum_to_one():
    rng = np.random.default_rng(9)
    scene = random_scene(rng, 25)
    white = scene.replace(colors=np.ones_like(scene.colors), background=np.ones(3))
    img = tile_render(white, small_camera())
    assert np.abs(img.pixels - 1.0).max() <= 1e-12
    _, weights = composite(scene, small_camera())
    assert max(abs(sum(w) - 1.0) for w in weights.values()) <= 1e-12


def test_single_tile_contribution_list_is_global_order():
    rng = np.random.default_rng(2)
    scene = random_scene(rng, 12, spread=0.05)
    scene = scene.replace(log_scales=np.full((12, 3), -4.0))
    cam = small_camera(16, 16)
    pr = project(*scene.arrays()[:4], cam)
    bins = bin_tiles(pr, 16, 16, 16)
    assert bins.tiles_x == bins.tiles_y == 1
    assert bins.prims.tolist() == depth_order(pr).tolist()


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 8)
    cam = small_camera()
    grads = render_backward(scene, cam, np.zeros((cam.height, cam.width, 3)))
    assert all(not np.any(g) for g in grads.values())


def test_single_primitive_gradient_fd():
    cam = axis_camera(12)
    rng = np.random.default_rng(0)
    target = rng.uniform(size=(12, 12, 3))
    base = one_prim([0.03, -0.02, 3.0], log_scale=-1.8, logit=0.4, color=(0.3, 0.6, 0.2))
    fields = [Tensor(np.array(f, dtype=np.float64), requires_grad=True) for f in base.arrays()]

    def loss():
        r = render_tensor(*fields, base.background, cam, 8)
        d = ad.sub(r, target)
        return ad.sum(ad.mul(d, d))

    with Tape() as tape:
        out = loss()
    analytic = tape.gradient(out, fields)
    h = 1e-6
    for f, g in zip(fields, analytic):
        flat = f.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss().data)
            flat[i] = orig - h
            fm = float(loss().data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(g).max(), 1e-12)
        assert np.abs(g.reshape(-1) - num).max() / scale < 1e-5


def test_occluded_color_gradient_bounded_by_transmittance():
    cam = axis_camera()
    z = np.arange(5) * 0.2 + 3.0
    n = 6
    means = np.zeros((n, 3))
    means[:, 2] = np.concatenate([z, [5.0]])
    # on the ray through pixel (8, 8)'s center so the front alphas hit the cap exactly
    means[:, 0] = 0.5 * means[:, 2] / cam.fx
    means[:, 1] = 0.5 * means[:, 2] / cam.fy
    logits = np.full(n, 12.0)
    scene = GaussianScene(means, np.full((n, 3), -1.0), np.tile([1.0, 0, 0, 0], (n, 1)), logits,
                          np.full((n, 3), 0.5), np.ones(3))
    up = np.zeros((16, 16, 3))
    up[8, 8] = 1.0
    grads = render_backward(scene, cam, up)
    bound = (1 - ALPHA_MAX) ** 5
    assert np.abs(grads["colors"][-1]).max() <= bound * (1 + 1e-9)
    assert np.abs(grads["colors"][-1]).max() > 0


def test_tile_path_is_faster_than_reference():
    scene = synth_scene("sphere", 10000, 0)
    cam = orbit_rig(4, 0, 3.5, 50.0, 128).cameras[0]
    tile_render(scene, cam)  # compile
    t0 = time.perf_counter()
    tile_render(scene, cam)
    t_tile = time.perf_counter() - t0
    t0 = time.perf_counter()
    render(scene, cam)
    t_ref = time.perf_counter() - t0
    assert t_ref >= 5 * t_tile, (t_ref, t_tile)


def test_invalid_tile_size():
    with pytest.raises(ValueError):
        tile_render(random_scene(np.random.default_rng(0), 2), small_camera(), tile_size=12)


def test_scale_clamp_in_projection():
    cam = axis_camera()
    a = project(np.array([[0, 0, 4.0]]), np.full((1, 3), -50.0), np.array([[1.0, 0, 0, 0]]), np.zeros(1), cam)
    assert np.allclose(a.scale, 1e-6)
