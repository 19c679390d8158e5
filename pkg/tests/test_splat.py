import math

import numpy as np
import pytest

from stgrid import splat
from stgrid.errors import DivergenceDetected, FormatError, ValidationError
from stgrid.splat import (CUTOFF_SIGMA, SCALE_FLOOR, DeformationField, Gaussians, OptimConfig,
                          deform, kernel, make_scene, render, tv_loss)


def taper_loop(q, c=CUTOFF_SIGMA):
    if c is None:
        return math.exp(-0.5 * q)
    if q >= c * c:
        return 0.0
    tail = math.exp(-0.5 * c * c)
    return (math.exp(-0.5 * q) - tail * (1 + 0.5 * (c * c - q))) / (1 - tail * (1 + 0.5 * c * c))


def composite_loop(g: Gaussians, h, w, bg, cutoff=CUTOFF_SIGMA):
    """Per-pixel front-to-back compositing with an explicit covariance inverse."""
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            color = np.zeros(3)
            T = 1.0
            for i in range(len(g)):
                c, s = math.cos(g.rotation[i]), math.sin(g.rotation[i])
                R = np.array([[c, -s], [s, c]])
                cov = R @ np.diag(g.scale[i] ** 2) @ R.T
                d = np.array([x, y], float) - g.mu[i]
                q = float(d @ np.linalg.inv(cov) @ d)
                wi = g.opacity[i] * taper_loop(q, cutoff)
                color += T * wi * g.color[i]
                T *= 1 - wi
            out[y, x] = color + T * np.asarray(bg)
    return out


def two_gaussians():
    return Gaussians(mu=np.array([[4.0, 5.0], [6.5, 4.0]]), scale=np.array([[2.0, 1.2], [1.5, 2.5]]),
                     rotation=np.array([0.3, -1.1]), color=np.array([[0.9, 0.1, 0.2], [0.1, 0.8, 0.7]]),
                     opacity=np.array([0.7, 0.6]))


# kernel and render ----------------------------------------------------------

def test_kernel_taper_properties():
    q = np.linspace(0, 12, 2001)
    k, dk = kernel(q)
    assert k[0] == 1.0 and np.all(k >= 0) and np.all(np.diff(k) <= 0)
    assert k[q >= 9].max() == 0.0
    # value and slope vanish at the truncation radius
    assert kernel(np.array([9.0 - 1e-9]))[0][0] < 1e-9
    assert abs(kernel(np.array([9.0 - 1e-9]))[1][0]) < 1e-8
    eps = 1e-6
    fd = (kernel(q[1:-1] + eps)[0] - kernel(q[1:-1] - eps)[0]) / (2 * eps)
    assert np.abs(fd - dk[1:-1]).max() < 1e-6
    plain, _ = kernel(q, None)
    assert np.array_equal(plain, np.exp(-0.5 * q))


@pytest.mark.parametrize("cutoff", [CUTOFF_SIGMA, None])
def test_two_overlapping_gaussians_match_loop(cutoff):
    g = two_gaussians()
    bg = (0.2, 0.3, 0.1)
    got = render(g, 10, 11, bg, cutoff)
    assert np.abs(got - composite_loop(g, 10, 11, bg, cutoff)).max() < 1e-12


def test_far_pixel_is_background():
    g = Gaussians(np.array([[1.0, 1.0]]), np.ones((1, 2)), np.zeros(1), np.ones((1, 3)), np.array([0.9]))
    img = render(g, 20, 20, (0.25, 0.5, 0.75))
    assert np.array_equal(img[15, 15], [0.25, 0.5, 0.75])


def test_opaque_tiny_gaussian_saturates():
    g = Gaussians(np.array([[3.0, 2.0]]), np.full((1, 2), 0.05), np.zeros(1),
                  np.array([[0.2, 0.6, 0.9]]), np.array([1 - 1e-6]))
    img = render(g, 5, 6)
    assert np.abs(img[2, 3] - [0.2, 0.6, 0.9]).max() < 1e-3


def test_render_bounded(rng):
    for seed in range(5):
        g = splat.random_gaussians(12, 16, 16, np.random.default_rng(seed))
        img = render(g, 16, 16, rng.uniform(size=3))
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_depth_order_matters_only_when_overlapping():
    g = two_gaussians()
    swapped = Gaussians(*(a[::-1] for a in g.arrays().values()))
    assert not np.allclose(render(g, 10, 11), render(swapped, 10, 11))
    apart = Gaussians(mu=np.array([[2.0, 2.0], [12.0, 12.0]]), scale=np.ones((2, 2)), rotation=np.zeros(2),
                      color=g.color, opacity=g.opacity)  # 3-sigma supports are disjoint
    apart_sw = Gaussians(*(a[::-1] for a in apart.arrays().values()))
    assert np.array_equal(render(apart, 15, 15), render(apart_sw, 15, 15))


def test_gaussians_validation():
    with pytest.raises(ValidationError):
        Gaussians(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValidationError):
        Gaussians(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1), np.zeros((1, 3)), np.zeros(1))


# deformation ----------------------------------------------------------------

def test_zero_init_deformation_is_identity():
    scene = splat.random_scene(6, 16, 16, seed=2)
    canon = render(scene.gaussians, 16, 16, scene.background)
    for t in (0.0, 0.37, 1.0):
        d = deform(scene, t)
        assert np.array_equal(d.mu, scene.gaussians.mu)
        assert np.abs(render(d, 16, 16, scene.background) - canon).max() <= 1e-7


def test_hand_set_constant_offset():
    scene = splat.random_scene(4, 16, 16, seed=1)
    w = dict(scene.deformation.weights)
    w["x.b3"] = np.array([1.0, 0.0])
    moved = deform(scene.with_parameters({**scene.parameters(), **{f"deform.{k}": v for k, v in w.items()}}), 0.5)
    assert np.allclose(moved.mu, scene.gaussians.mu + [1.0, 0.0], atol=0)
    assert np.array_equal(moved.color, scene.gaussians.color)


def test_scale_floor_and_zero_gradient():
    scene = splat.random_scene(2, 12, 12, seed=4)
    p = scene.parameters()
    p["deform.s.b3"] = np.array([-100.0, 0.0])
    s2 = scene.with_parameters(p)
    assert np.all(deform(s2, 0.5).scale[:, 0] == SCALE_FLOOR)
    target = np.random.default_rng(0).uniform(size=(1, 12, 12, 3))
    _, grads = splat.scene_loss_grad(s2, target, times=[0.5])
    assert np.all(grads["scale"][:, 0] == 0.0)
    assert grads["deform.s.b3"][0] == 0.0


def test_deform_time_range():
    with pytest.raises(ValidationError):
        deform(splat.random_scene(1, 8, 8), 1.5)


# gradients ------------------------------------------------------------------

def _fd_check(scene, targets, probes, lam_tv=0.0, seed=0):
    r = np.random.default_rng(seed)
    _, grads = splat.scene_loss_grad(scene, targets, lam_tv=lam_tv)
    p = scene.parameters()
    keys = sorted(p)
    worst = 0.0
    for _ in range(probes):
        k = keys[r.integers(len(keys))]
        idx = tuple(int(r.integers(s)) for s in p[k].shape)
        vals = []
        for sign in (1, -1):
            q = {kk: v.copy() for kk, v in p.items()}
            q[k][idx] += sign * 1e-4
            vals.append(splat.scene_loss(scene.with_parameters(q), targets, lam_tv=lam_tv))
        fd = (vals[0] - vals[1]) / 2e-4
        an = grads[k][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_gradients_match_finite_differences():
    scene = splat.random_scene(3, 16, 16, seed=3, motion=0.5)
    targets = np.random.default_rng(1).uniform(size=(2, 16, 16, 3))
    assert _fd_check(scene, targets, 40, lam_tv=0.1) < 1e-3


def test_zero_loss_zero_gradient():
    scene = splat.random_scene(3, 12, 12, seed=5, motion=0.3)
    targets = splat.render_frames(scene, splat.normalized_times(2), 12, 12)
    loss, grads = splat.scene_loss_grad(scene, targets, norm="l2")
    assert loss == 0.0
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8


def test_color_gradient_sign():
    g = two_gaussians()
    scene = make_scene(g, 10, 11)
    target = render(g, 10, 11)[None] + 0.05
    _, grads = splat.scene_loss_grad(scene, target, times=[0.0])
    assert np.all(grads["color"] < 0)


# tv -------------------------------------------------------------------------

def test_tv_loss_examples():
    assert tv_loss(np.full((5, 6, 3), 0.4)) == 0.0
    h, w, delta = 5, 6, 0.3
    img = np.zeros((h, w, 3))
    img[:, 3:] = delta
    n_terms = h * (w - 1) + (h - 1) * w
    assert math.isclose(tv_loss(img), h * delta ** 2 / n_terms, rel_tol=0, abs_tol=1e-15)
    rnd = np.random.default_rng(0).uniform(size=(7, 7, 3))
    assert math.isclose(tv_loss(2 * rnd), 4 * tv_loss(rnd), rel_tol=1e-12)


def test_tv_grad_matches_fd(rng):
    img = rng.uniform(size=(4, 5, 3))
    g = splat.tv_grad(img)
    for idx in [(0, 0, 0), (2, 3, 1), (3, 4, 2)]:
        e = np.zeros_like(img)
        e[idx] = 1e-6
        fd = (tv_loss(img + e) - tv_loss(img - e)) / 2e-6
        assert abs(fd - g[idx]) < 1e-8


# optimisation -----------------------------------------------------------------

def test_color_only_fit_recovers_color():
    true = Gaussians(np.array([[8.0, 8.0]]), np.array([[3.0, 2.5]]), np.array([0.4]),
                     np.array([[0.8, 0.3, 0.55]]), np.array([0.9]))
    target = render(true, 16, 16)[None]
    start = Gaussians(true.mu, true.scale, true.rotation, np.array([[0.4, 0.6, 0.2]]), true.opacity)
    cfg = OptimConfig(iterations=400, lr_geometry=0.0, lr_deform=0.0, lr_opacity=0.0,
                      lr_color=2e-2)
    fit, losses = splat.optimize(make_scene(start, 16, 16), target, cfg, times=[0.0])
    assert np.abs(fit.gaussians.color - true.color).max() < 1e-2
    assert np.array_equal(fit.gaussians.mu, true.mu)


def test_optimize_monotone_history_and_progress():
    gt = splat.random_scene(6, 16, 16, seed=8, motion=1.0)
    targets = splat.render_frames(gt, splat.normalized_times(3), 16, 16)
    init = splat.random_scene(6, 16, 16, seed=9)
    _, losses = splat.optimize(init, targets, OptimConfig(iterations=120))
    assert losses[-1] < losses[0]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_optimize_rejects_bad_input():
    scene = splat.random_scene(2, 8, 8)
    with pytest.raises(ValidationError):
        splat.optimize(scene, np.zeros((1, 8, 8, 3)), OptimConfig(iterations=0))
    with pytest.raises(DivergenceDetected):
        splat.optimize(scene, np.full((1, 8, 8, 3), np.nan), OptimConfig(iterations=3))


def test_scene_roundtrip(tmp_path):
    scene = splat.random_scene(5, 12, 12, seed=2, motion=0.4)
    splat.save_scene(tmp_path / "s.json", scene, frames=3)
    back = splat.load_scene(tmp_path / "s.json")
    for k, v in scene.parameters().items():
        assert np.allclose(back.parameters()[k], v, atol=1e-6)
    (tmp_path / "bad.json").write_text('{"schema": 2}')
    with pytest.raises(FormatError):
        splat.load_scene(tmp_path / "bad.json")
