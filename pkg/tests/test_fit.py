"""Masking, losses, analytic gradients, the optimizer and pruning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import CLASSES, GRAD_CAM, GRAD_CFG, random_trial, relative_errors
from scenes import random_splats
from splatworld.core import CameraIntrinsics, CameraPose, RgbdImage
from splatworld.errors import DimensionMismatch, EmptyMask, NoFrames
from splatworld.fit import FitConfig, TrainingView, evaluate, loss, loss_gradients, mask_frame, optimize, prune
from splatworld.splat import SH_C0, GaussianSet, rasterize, render_buffers, rgb_to_sh0



def self_view(splats, mask=None, cam=GRAD_CAM, pose=CameraPose()):
    img = rasterize(splats, cam, pose, GRAD_CFG.render)
    mask = np.ones(img.depth.shape, bool) if mask is None else mask
    return TrainingView(mask_frame(img, mask), mask, cam, pose)


# --- mask_frame -------------------------------------------------------------------


def random_frame(seed, h=6, w=5):
    rng = np.random.default_rng(seed)
    return RgbdImage(rng.random((h, w, 3)), rng.uniform(0.5, 2.0, (h, w)))


def test_mask_all_ones_is_identity():
    f = random_frame(0)
    out = mask_frame(f, np.ones((6, 5)))
    assert np.array_equal(out.rgb, f.rgb) and np.array_equal(out.depth, f.depth)


def test_mask_all_zeros_is_background():
    out = mask_frame(random_frame(1), np.zeros((6, 5)), background=(0.2, 0.4, 0.6))
    assert np.all(out.depth == 0)
    assert np.array_equal(out.rgb, np.broadcast_to([0.2, 0.4, 0.6], out.rgb.shape))


def test_mask_checkerboard_matches_elementwise_product():
    f = random_frame(2)
    m = (np.add.outer(np.arange(6), np.arange(5)) % 2).astype(float)
    out = mask_frame(f, m)
    np.testing.assert_array_equal(out.rgb, f.rgb * m[..., None])
    np.testing.assert_array_equal(out.depth, f.depth * m)


def test_mask_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mask_frame(random_frame(3), np.ones((5, 6)))


# --- loss -----------------------------------------------------------------------


def test_self_rendered_gt_has_zero_photometric_and_depth_loss():
    s = random_splats(np.random.default_rng(4), 10)
    lb = loss(s, self_view(s), GRAD_CFG)
    assert lb.l_rec == 0.0 and lb.l_depth == 0.0


def test_constant_depth_offset():
    s = random_splats(np.random.default_rng(5), 10)
    img = rasterize(s, GRAD_CAM, CameraPose(), GRAD_CFG.render)
    shifted = RgbdImage(img.rgb, np.where(img.depth > 0, img.depth + 0.1, 0.0))
    mask = np.ones(img.depth.shape, bool)
    lb = loss(s, TrainingView(shifted, mask, GRAD_CAM, CameraPose()), GRAD_CFG)
    assert abs(lb.l_depth - 0.1) < 1e-12


def test_empty_mask_rejected():
    s = random_splats(np.random.default_rng(6), 3)
    with pytest.raises(EmptyMask):
        loss(s, self_view(s, np.zeros((32, 32), bool)), GRAD_CFG)


def scalar_loss_oracle(splats, view, cfg):
    """Recompute the loss pixel by pixel from dumped render buffers."""
    _, buf = render_buffers(splats, view.cam, view.pose, cfg.render)
    gt = view.image
    cam = view.cam
    h, w = gt.depth.shape

    def back(u, v):
        d = gt.depth[v, u]
        return np.array([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d])

    rec, rec_n, dep, dep_n, nrm, nrm_n = 0.0, 0, 0.0, 0, 0.0, 0
    for v in range(h):
        for u in range(w):
            if not view.mask[v, u]:
                continue
            rec += sum(abs(buf.color[v, u, c] - gt.rgb[v, u, c]) for c in range(3))
            rec_n += 3
            if not (gt.depth[v, u] > 0 and buf.weight[v, u] >= 0.5):
                continue
            d = buf.depth_num[v, u] / buf.weight[v, u]
            dep += abs(d - gt.depth[v, u])
            dep_n += 1
            nbrs = [(u + 1, v), (u - 1, v), (u, v + 1), (u, v - 1)]
            if not (0 < u < w - 1 and 0 < v < h - 1) or any(gt.depth[y, x] <= 0 for x, y in nbrs):
                continue
            n = np.cross(back(u + 1, v) - back(u - 1, v), back(u, v + 1) - back(u, v - 1))
            if np.linalg.norm(n) == 0:
                continue
            n /= np.linalg.norm(n)
            if n @ back(u, v) > 0:
                n = -n
            rendered = buf.normal_num[v, u] / buf.weight[v, u]
            nrm += 1 - rendered @ n
            nrm_n += 1
    l_rec, l_depth = rec / rec_n, dep / max(dep_n, 1)
    l_n = nrm / max(nrm_n, 1)
    return l_rec, l_n, l_depth, l_rec + cfg.lambda_normal * l_n + cfg.lambda_depth * l_depth


@pytest.mark.parametrize("seed", [7, 8])
def test_loss_matches_per_pixel_recomputation(seed):
    est, view = random_trial(seed)
    lb = loss(est, view, GRAD_CFG)
    oracle = scalar_loss_oracle(est, view, GRAD_CFG)
    np.testing.assert_allclose([lb.l_rec, lb.l_n, lb.l_depth, lb.total], oracle, rtol=1e-10, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_total_decomposition_identity(lam_n, lam_d):
    est, view = random_trial(9)
    cfg = FitConfig(lambda_normal=lam_n, lambda_depth=lam_d, render=GRAD_CFG.render)
    lb = loss(est, view, cfg)
    assert abs(lb.total - (lb.l_rec + lam_n * lb.l_n + lam_d * lb.l_depth)) <= 1e-9
    assert min(lb.l_rec, lb.l_n, lb.l_depth) >= 0


# --- gradients ---------------------------------------------------------------------


def test_zero_loss_configuration_has_zero_gradient():
    s = random_splats(np.random.default_rng(10), 10)
    cfg = FitConfig(lambda_normal=0.0, render=GRAD_CFG.render)
    g = loss_gradients(s, self_view(s), cfg)
    assert np.abs(g.flat()).max() <= 1e-9


def test_color_gradient_of_single_splat():
    cam = CameraIntrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
    geom = dict(means=[[0.0, 0.0, 1.0]], quats=[[1.0, 0, 0, 0]], scales=[[0.2, 0.2]], opacities=[0.9])
    gt = GaussianSet.from_colors(rgb=[[0.2, 0.5, 0.8]], **geom)
    est = GaussianSet.from_colors(rgb=[[0.3, 0.4, 0.8]], **geom)
    view = self_view(gt, cam=cam)
    cfg = FitConfig(lambda_normal=0.0, lambda_depth=0.0, render=GRAD_CFG.render)
    ev = evaluate(est, view, cfg, with_grads=True)
    g = ev.grads.sh[0, 0]
    resid = (ev.buffers.color - view.image.rgb)[view.mask]
    n = view.mask.sum()
    w = ev.buffers.weight[view.mask]
    expected = SH_C0 * (np.sign(resid) * w[:, None]).sum(axis=0) / (3 * n)
    np.testing.assert_allclose(g, expected, atol=1e-12)
    assert g[0] > 0 and g[1] < 0 and abs(g[2]) < 1e-12
    assert np.all(np.sign(g[:2]) == np.sign(resid.mean(axis=0)[:2]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    est, view = random_trial(seed)
    errs = relative_errors(est, view)
    assert set(errs) == set(CLASSES)
    for k, e in errs.items():
        assert e < 1e-3, (k, e)


# --- optimize -----------------------------------------------------------------------


def test_optimize_needs_frames():
    with pytest.raises(NoFrames):
        optimize([], random_splats(np.random.default_rng(0), 2), FitConfig(iterations=1))


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(iterations=0)
    with pytest.raises(ValueError):
        FitConfig(lambda_depth=-1)
    with pytest.raises(ValueError):
        FitConfig(lr_color=0)


def test_perfect_init_is_a_fixed_point():
    gt = random_splats(np.random.default_rng(11), 10)
    gt = gt.replace(sh=np.abs(gt.sh) + 0.2)  # bright enough to survive pruning
    views = [self_view(gt)]
    cfg = FitConfig(iterations=20, lambda_normal=0.0, render=GRAD_CFG.render)
    res = optimize(views, gt, cfg)
    assert len(res.splats) == len(gt)
    np.testing.assert_allclose(res.splats.means, gt.means, atol=1e-12)
    np.testing.assert_allclose(res.splats.sh, gt.sh, atol=1e-12)
    assert res.final_loss <= 1e-12


def test_single_splat_color_converges():
    geom = dict(means=[[0.0, 0.0, 1.0]], quats=[[1.0, 0, 0, 0]], scales=[[0.15, 0.15]], opacities=[0.95])
    target = np.array([[0.7, 0.3, 0.5]])
    gt = GaussianSet.from_colors(rgb=target, **geom)
    init = GaussianSet.from_colors(rgb=[[0.5, 0.5, 0.5]], **geom)
    cfg = FitConfig(iterations=500, lambda_normal=0.0, lambda_depth=0.0, lr_means=1e-12, lr_rotation=1e-12,
                    lr_scale=1e-12, lr_opacity=1e-12, lr_color=5e-3, render=GRAD_CFG.render)
    res = optimize([self_view(gt)], init, cfg)
    np.testing.assert_allclose(res.splats.base_colors[0], target[0], atol=1e-3)


def test_optimize_is_deterministic_and_never_worse():
    rng = np.random.default_rng(12)
    gt = random_splats(rng, 15)
    views = [self_view(gt)]
    init = random_splats(rng, 15)
    cfg = FitConfig(iterations=30, seed=3, render=GRAD_CFG.render)
    a, b = optimize(views, init, cfg), optimize(views, init, cfg)
    assert np.array_equal(a.splats.means, b.splats.means) and a.history == b.history
    assert a.final_loss <= a.initial_loss
    assert len(a.history) == 30


# --- prune ----------------------------------------------------------------------------


def test_prune_keeps_everything_above_floors():
    s = random_splats(np.random.default_rng(13), 10)
    s = s.replace(opacities=np.full(10, 0.5), sh=np.tile(rgb_to_sh0(np.array([0.5, 0.5, 0.5])), (10, 1))[:, None])
    out = prune(s)
    assert len(out) == 10 and np.array_equal(out.means, s.means)


def test_prune_all_transparent_is_empty():
    s = random_splats(np.random.default_rng(14), 10).replace(opacities=np.zeros(10))
    assert len(prune(s)) == 0


def test_prune_matches_brute_force_filter():
    rng = np.random.default_rng(15)
    s = random_splats(rng, 200)
    s = s.replace(opacities=rng.uniform(0, 0.05, 200), sh=rng.normal(-1.5, 0.5, (200, 1, 3)))
    cfg = FitConfig()
    keep = []
    for i in range(len(s)):
        rgb = np.clip(0.5 + SH_C0 * s.sh[i, 0], 0, 1)
        luma = 0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
        if s.opacities[i] >= cfg.prune_opacity_floor and luma >= cfg.prune_color_floor:
            keep.append(i)
    assert 0 < len(keep) < 200
    np.testing.assert_array_equal(prune(s, cfg).means, s.means[keep])
