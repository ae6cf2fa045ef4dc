"""Splat data model, rigid synchronization, rasterizer and point filters."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.spatial.transform import Rotation

from scenes import random_splats, ring_cameras, sphere_splats
from splatworld.core import CameraIntrinsics, CameraPose, RgbdImage, RigidTransform, compose, rotz
from splatworld.errors import DimensionMismatch, NoValidPixels
from splatworld.splat import (
    SH_C0,
    GaussianSet,
    RenderOptions,
    dedup_background,
    filter_radius_outliers,
    init_from_rgbd,
    radius_outlier_mask,
    rasterize,
    render_buffers,
    render_downsampled,
    rgb_to_sh0,
    world_splats,
)

CAM32 = CameraIntrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)


def mat(q):
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def brute_force_render(splats: GaussianSet, cam: CameraIntrinsics, pose: CameraPose, floor, bg):
    """Per-pixel loop over a global depth sort; everything re-derived from the parameters."""
    c2w = np.eye(4)
    c2w[:3, :3] = mat(pose.world_from_camera.rotation)
    c2w[:3, 3] = pose.world_from_camera.translation
    w2c = np.linalg.inv(c2w)
    items = []
    for i in range(len(splats)):
        p = w2c[:3, :3] @ splats.means[i] + w2c[:3, 3]
        if p[2] <= 0.01:
            continue
        r = w2c[:3, :3] @ mat(splats.quats[i] / np.linalg.norm(splats.quats[i]))
        x, y, z = p
        jac = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
        m = jac @ np.c_[r[:, 0] * splats.scales[i, 0], r[:, 1] * splats.scales[i, 1]]
        cov = m @ m.T + 0.3 * np.eye(2)
        center = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        color = 0.5 + SH_C0 * splats.sh[i, 0]
        items.append((z, i, center, np.linalg.inv(cov), color, splats.opacities[i]))
    items.sort(key=lambda t: (t[0], t[1]))
    e9 = math.exp(-4.5)
    rgb = np.zeros((cam.height, cam.width, 3))
    depth = np.zeros((cam.height, cam.width))
    for v in range(cam.height):
        for u in range(cam.width):
            trans, wsum, dsum, col = 1.0, 0.0, 0.0, np.zeros(3)
            for z, _, center, conic, color, alpha in items:
                d = np.array([u, v]) - center
                q = d @ conic @ d
                g = (math.exp(-0.5 * q) - e9 * (1 + (9 - q) / 2)) / (1 - 5.5 * e9) if q < 9 else 0.0
                a = alpha * g
                if a < floor:
                    a = 0.0
                w = trans * a
                col += w * color
                wsum += w
                dsum += w * z
                trans *= 1 - a
            rgb[v, u] = col + trans * np.asarray(bg)
            depth[v, u] = dsum / wsum if wsum >= 0.5 else 0.0
    return rgb, depth


# --- world_splats ---------------------------------------------------------------


def one_splat(p, q=(1.0, 0, 0, 0)):
    return GaussianSet(np.array([p], dtype=float), np.array([q], dtype=float), np.array([[0.02, 0.01]]),
                       np.array([0.7]), np.zeros((1, 1, 3)))


def test_world_splats_identity():
    s = random_splats(np.random.default_rng(0), 20)
    out = world_splats(RigidTransform.identity(), s)
    np.testing.assert_array_equal(out.means, s.means)
    np.testing.assert_allclose(out.quats, s.quats / np.linalg.norm(s.quats, axis=1)[:, None]
                               * np.sign(s.quats[:, :1] + 1e-300), atol=1e-15)


def test_world_splats_pure_translation():
    s = one_splat([1.0, 0, 0], [0.9, 0.1, 0.2, 0.3])
    s = s.replace(quats=s.quats / np.linalg.norm(s.quats))
    out = world_splats(RigidTransform.from_translation([0, 0, 1.0]), s)
    np.testing.assert_allclose(out.means[0], [1.0, 0, 1.0])
    np.testing.assert_allclose(out.quats[0], s.quats[0], atol=1e-15)
    np.testing.assert_array_equal(out.scales, s.scales)
    np.testing.assert_array_equal(out.opacities, s.opacities)


def test_world_splats_quarter_turn_matches_matrix_oracle():
    q_local = np.array([0.8, 0.2, -0.4, 0.4]) / np.linalg.norm([0.8, 0.2, -0.4, 0.4])
    s = one_splat([1.0, 0, 0], q_local)
    pose = RigidTransform(rotz(math.pi / 2))
    out = world_splats(pose, s)
    h = np.eye(4)
    h[:3, :3] = mat(pose.rotation)
    np.testing.assert_allclose(out.means[0], (h @ [1.0, 0, 0, 1])[:3], atol=1e-15)
    np.testing.assert_allclose(mat(out.quats[0]), h[:3, :3] @ mat(q_local), atol=1e-12)


quats = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 4).filter(lambda q: np.linalg.norm(q) > 0.1)
vecs = st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 3)


@settings(max_examples=50)
@given(quats, vecs, quats, vecs)
def test_world_splats_composes(q1, t1, q2, t2):
    s = random_splats(np.random.default_rng(1), 10)
    a, b = RigidTransform(q1, t1), RigidTransform(q2, t2)
    chained = world_splats(b, world_splats(a, s))
    direct = world_splats(compose(b, a), s)
    np.testing.assert_allclose(chained.means, direct.means, atol=1e-9)
    dots = np.abs(np.einsum("ni,ni->n", chained.quats, direct.quats))
    np.testing.assert_allclose(dots, 1.0, atol=1e-9)


# --- rasterize --------------------------------------------------------------------


def test_single_splat_on_axis():
    cam = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    color = np.array([[0.2, 0.6, 0.9]])
    s = GaussianSet.from_colors([[0.0, 0.0, 1.0]], [[1.0, 0, 0, 0]], [[0.05, 0.05]], [1.0], color)
    img = rasterize(s, cam, CameraPose(), RenderOptions(supersample_factor=1))
    assert abs(img.depth[64, 64] - 1.0) <= 1e-3
    np.testing.assert_allclose(img.rgb[64, 64], color[0], atol=1e-12)


def test_front_splat_occludes():
    cam = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    s = GaussianSet.from_colors([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]], [[1.0, 0, 0, 0]] * 2, [[0.05, 0.05]] * 2,
                                [1.0, 1.0], [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    img = rasterize(s, cam, CameraPose(), RenderOptions(supersample_factor=1))
    assert abs(img.depth[64, 64] - 1.0) <= 1e-3
    np.testing.assert_allclose(img.rgb[64, 64], [1.0, 0.0, 0.0], atol=1e-12)


def test_empty_scene_is_background():
    opts = RenderOptions(supersample_factor=1, background=(0.1, 0.2, 0.3))
    img = rasterize(GaussianSet.empty(), CAM32, CameraPose(), opts)
    assert np.all(img.depth == 0)
    np.testing.assert_array_equal(img.rgb, np.broadcast_to([0.1, 0.2, 0.3], img.rgb.shape))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_splats(rng, 50)
    pose = CameraPose.look_at([0.2, -0.1, -0.1], [0.0, 0.0, 1.0])
    opts = RenderOptions(supersample_factor=1, background=(0.05, 0.1, 0.2))
    img = rasterize(s, CAM32, pose, opts)
    rgb, depth = brute_force_render(s, CAM32, pose, opts.opacity_floor, opts.background)
    np.testing.assert_allclose(img.rgb, rgb, atol=1e-12)
    np.testing.assert_allclose(img.depth, depth, atol=1e-12)


def test_bit_identical_across_tiles_and_threads():
    rng = np.random.default_rng(3)
    s = random_splats(rng, 50, sh_degree=1)
    cam = CameraIntrinsics(60.0, 60.0, 24.0, 20.0, 48, 40)
    ref = rasterize(s, cam, CameraPose(), RenderOptions(supersample_factor=1))
    for tile in (1, 7, 16, 64):
        for threads in (1, 3):
            img = rasterize(s, cam, CameraPose(), RenderOptions(supersample_factor=1, tile_size=tile), threads)
            assert np.array_equal(img.rgb, ref.rgb) and np.array_equal(img.depth, ref.depth)


def test_depth_invalid_below_half_weight():
    s = GaussianSet.from_colors([[0.0, 0.0, 1.0]], [[1.0, 0, 0, 0]], [[0.05, 0.05]], [0.4], [[1.0, 1.0, 1.0]])
    img = rasterize(s, CAM32, CameraPose(), RenderOptions(supersample_factor=1))
    assert np.all(img.depth == 0)  # max weight is the opacity, 0.4 < 0.5
    assert img.rgb[16, 16, 0] > 0.3


def test_adding_a_splat_never_decreases_opacity():
    rng = np.random.default_rng(4)
    s = random_splats(rng, 30)
    opts = RenderOptions(supersample_factor=1)
    _, before = render_buffers(s, CAM32, CameraPose(), opts)
    for k in range(5):
        extra = random_splats(np.random.default_rng(100 + k), 1)
        _, after = render_buffers(GaussianSet.concatenate([s, extra]), CAM32, CameraPose(), opts)
        assert np.all(1 - after.transmittance >= 1 - before.transmittance - 1e-12)


@settings(max_examples=10, deadline=None)
@given(quats, st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3))
def test_render_transform_equivariance_property(q, t):
    s = random_splats(np.random.default_rng(5), 60)
    pose = CameraPose.look_at([0.3, 0.2, 0.0], [0.0, 0.0, 1.0])
    opts = RenderOptions(supersample_factor=2)
    ref = render_downsampled(s, CAM32, pose, 32, 32, opts)
    tr = RigidTransform(q, t)
    moved = render_downsampled(world_splats(tr, s), CAM32, pose.transformed(tr), 32, 32, opts)
    np.testing.assert_allclose(moved.rgb, ref.rgb, atol=1e-5)
    np.testing.assert_allclose(moved.depth, ref.depth, atol=1e-5)


# --- render_downsampled ---------------------------------------------------------------


def test_supersample_one_is_plain_rasterize():
    s = random_splats(np.random.default_rng(6), 40)
    opts = RenderOptions(supersample_factor=1)
    a = render_downsampled(s, CAM32, CameraPose(), 32, 32, opts)
    b = rasterize(s, CAM32, CameraPose(), opts)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


def test_constant_color_scene_downsamples_to_constant():
    color = (0.3, 0.6, 0.9)
    rng = np.random.default_rng(7)
    s = random_splats(rng, 40)
    s = s.replace(sh=np.tile(rgb_to_sh0(np.array(color)), (len(s), 1))[:, None, :])
    img = render_downsampled(s, CAM32, CameraPose(), 16, 16, RenderOptions(supersample_factor=4, background=color))
    np.testing.assert_allclose(img.rgb, np.broadcast_to(color, img.rgb.shape), atol=1e-12)


def test_downsample_matches_independent_box_resampler():
    rng = np.random.default_rng(8)
    s = random_splats(rng, 80, xy=0.25)
    cam = CameraIntrinsics(150.0, 150.0, 64.0, 64.0, 128, 128)
    opts = RenderOptions(supersample_factor=4, background=(0.1, 0.1, 0.1))
    low = render_downsampled(s, cam, CameraPose(), 128, 128, opts)
    high = rasterize(s, cam.scaled(4), CameraPose(), opts)
    assert high.rgb.shape == (512, 512, 3)
    oracle = np.asarray(Image.fromarray(high.rgb8).resize((128, 128), Image.BOX))
    diff = np.abs(oracle.astype(int) - low.rgb8.astype(int))
    assert diff.max() <= 1


def test_downsampled_depth_averages_valid_pixels_only():
    from splatworld.splat import box_downsample

    depth = np.array([[0.0, 2.0], [4.0, 0.0]])
    img = box_downsample(RgbdImage(np.zeros((2, 2, 3)), depth), 2)
    assert img.depth[0, 0] == 3.0
    img = box_downsample(RgbdImage(np.zeros((2, 2, 3)), np.zeros((2, 2))), 2)
    assert img.depth[0, 0] == 0.0


# --- init_from_rgbd -----------------------------------------------------------------


def test_init_requires_valid_masked_pixels():
    img = RgbdImage(np.zeros((8, 8, 3)), np.ones((8, 8)))
    cam = CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)
    with pytest.raises(NoValidPixels):
        init_from_rgbd([(img, np.zeros((8, 8), bool), cam, CameraPose())])
    with pytest.raises(DimensionMismatch):
        init_from_rgbd([(img, np.ones((4, 4), bool), cam, CameraPose())])


def test_init_single_center_pixel():
    cam = CameraIntrinsics(40.0, 40.0, 4.0, 4.0, 8, 8)
    depth = np.zeros((8, 8))
    depth[4, 4] = 1.0
    rgb = np.zeros((8, 8, 3))
    rgb[4, 4] = [0.25, 0.5, 0.75]
    pose = CameraPose.look_at([1.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    out = init_from_rgbd([(RgbdImage(rgb, depth), np.ones((8, 8), bool), cam, pose)])
    assert len(out) == 1
    np.testing.assert_allclose(out.means[0], [0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.base_colors[0], [0.25, 0.5, 0.75], atol=1e-12)
    assert out.opacities[0] == 0.5
    np.testing.assert_allclose(out.scales[0], [0.025, 0.025])
    np.testing.assert_allclose(out.normals()[0], [1.0, 0.0, 0.0], atol=1e-12)


def test_init_scale_is_clamped():
    cam = CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)
    img = RgbdImage(np.zeros((8, 8, 3)), np.full((8, 8), 3.0))
    out = init_from_rgbd([(img, np.ones((8, 8), bool), cam, CameraPose())], stride=4)
    assert len(out) == 4
    assert np.all(out.scales == 0.05)


def test_init_from_rendered_sphere_lies_on_surface():
    # rendered depth is the blend of disk-centre depths, so the sphere needs a dense tiling
    gt = sphere_splats(1000, disk=0.012)
    frames = []
    for c in ring_cameras(8, 64):
        img = rasterize(gt, c.intrinsics, c.pose, RenderOptions(supersample_factor=1))
        frames.append((img, img.depth > 0, c.intrinsics, c.pose))
    init = init_from_rgbd(frames, stride=2)
    dist = np.abs(np.linalg.norm(init.means - [0.0, 0.0, 0.1], axis=1) - 0.1)
    voxel = 0.005
    assert np.mean(dist <= 2 * voxel) >= 0.95


# --- filters --------------------------------------------------------------------------


def test_dense_cluster_kept_and_isolated_point_removed():
    rng = np.random.default_rng(9)
    cluster = rng.normal(0, 0.001, (100, 3))
    radius = 0.02
    assert len(filter_radius_outliers(cluster, radius, 5)) == 100
    pts = np.vstack([cluster, [[10 * radius, 0, 0]]])
    kept = filter_radius_outliers(pts, radius, 5)
    assert len(kept) == 100 and not np.any(np.all(kept == [10 * radius, 0, 0], axis=1))


def test_radius_filter_matches_brute_force():
    rng = np.random.default_rng(10)
    pts = rng.uniform(0, 1, (1000, 3))
    radius, k = 0.08, 3
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    expected = ((d <= radius).sum(axis=1) - 1) >= k
    np.testing.assert_array_equal(radius_outlier_mask(pts, radius, k), expected)


def test_radius_filter_on_splats_keeps_rows():
    s = random_splats(np.random.default_rng(11), 50)
    keep = radius_outlier_mask(s, 0.05, 1)
    out = filter_radius_outliers(s, 0.05, 1)
    np.testing.assert_array_equal(out.means, s.means[keep])
    np.testing.assert_array_equal(out.sh, s.sh[keep])
    with pytest.raises(ValueError):
        radius_outlier_mask(s, 0.0, 1)


def test_dedup_background_cases():
    rng = np.random.default_rng(12)
    scene = random_splats(rng, 200, xy=0.5)
    assert dedup_background(scene, [], 0.01) is scene
    assert len(dedup_background(scene, [scene], 0.01)) == 0
    objects = [random_splats(rng, 30, xy=0.5), random_splats(rng, 20, xy=0.5)]
    radius = 0.06
    out = dedup_background(scene, objects, radius)
    obj = np.vstack([o.means for o in objects])
    d = np.linalg.norm(scene.means[:, None] - obj[None], axis=2).min(axis=1)
    np.testing.assert_array_equal(out.means, scene.means[d > radius])


# --- model ---------------------------------------------------------------------------


def test_gaussian_set_indexing_and_concatenation():
    a = random_splats(np.random.default_rng(13), 5)
    b = random_splats(np.random.default_rng(14), 3, sh_degree=1)
    c = GaussianSet.concatenate([a, b])
    assert len(c) == 8 and c.sh_degree == 1
    np.testing.assert_array_equal(c.sh[:5, 0], a.sh[:, 0])
    assert np.all(c.sh[:5, 1:] == 0)
    assert len(c[np.array([0, 6])]) == 2
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((1, 3)), np.zeros((1, 4)), np.ones((1, 2)), np.ones(1), np.zeros((1, 2, 3)))
