"""Shared fixtures-by-construction for the test-suite (plain functions, no pytest magic)."""

from __future__ import annotations

import numpy as np

from splatworld.agent import Action, GripperAgent
from splatworld.core import Camera, CameraIntrinsics, CameraPose, RigidTransform, rotz
from splatworld.dynamics import ObjectAsset, PhysicalParams, WorldState
from splatworld.fit import TrainingView, mask_frame
from splatworld.mesh import box_mesh
from splatworld.splat import GaussianSet, RenderOptions, rasterize
from splatworld.splat.model import _facing_rotations

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
CUBE_HALF = 0.025


def random_splats(rng, n, sh_degree=0, z=(0.9, 1.1), xy=0.15, scale=(0.03, 0.08)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1)[:, None]
    means = np.c_[rng.uniform(-xy, xy, (n, 2)), rng.uniform(z[0], z[1], n)]
    sh = rng.normal(0, 0.8, size=(n, (sh_degree + 1) ** 2, 3))
    return GaussianSet(means, q, rng.uniform(scale[0], scale[1], (n, 2)), rng.uniform(0.3, 0.95, n), sh)


def fibonacci_sphere(n, radius):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.c_[np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]


def sphere_splats(n=200, radius=0.1, center=(0.0, 0.0, 0.1), disk=0.03):
    pts = fibonacci_sphere(n, radius)
    nrm = pts / radius
    col = 0.5 + 0.4 * np.c_[nrm[:, 0], nrm[:, 1] * nrm[:, 2], -nrm[:, 2]]
    quats = _facing_rotations(nrm, np.array([1.0, 0.0, 0.0]))
    return GaussianSet.from_colors(pts + np.asarray(center), quats, np.full((n, 2), disk), np.full(n, 0.95), col)


def ring_cameras(n_views=8, size=64, center=(0.0, 0.0, 0.1), dist=0.6, f=70.0):
    cam = CameraIntrinsics(f * size / 64, f * size / 64, size / 2, size / 2, size, size)
    out = []
    for k in range(n_views):
        ang = 2 * np.pi * k / n_views
        el = 0.4 if k % 2 else -0.1
        eye = dist * np.array([np.cos(ang) * np.cos(el), np.sin(ang) * np.cos(el), np.sin(el)]) + center
        out.append(Camera(f"view{k}", cam, CameraPose.look_at(eye, center)))
    return out


def synthetic_views(gt: GaussianSet, cameras):
    """Masked training views rendered from the ground-truth splats at native resolution."""
    opts = RenderOptions(supersample_factor=1)
    views = []
    for c in cameras:
        img = rasterize(gt, c.intrinsics, c.pose, opts)
        mask = img.depth > 0
        views.append(TrainingView(mask_frame(img, mask), mask, c.intrinsics, c.pose))
    return views


def cube_splats(half=CUBE_HALF, per_side=4, color=(0.8, 0.2, 0.2)):
    """Disks tiling the six faces of an axis-aligned cube, in its local frame."""
    ticks = (np.arange(per_side) + 0.5) / per_side * 2 - 1
    means, normals = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            for a in ticks:
                for b in ticks:
                    p = np.zeros(3)
                    p[axis] = sign * half
                    p[(axis + 1) % 3] = a * half
                    p[(axis + 2) % 3] = b * half
                    n = np.zeros(3)
                    n[axis] = sign
                    means.append(p)
                    normals.append(n)
    normals = np.array(normals)
    quats = _facing_rotations(normals, np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8]))
    k = len(means)
    s = half / per_side * 1.2
    return GaussianSet.from_colors(np.array(means), quats, np.full((k, 2), s), np.full(k, 0.9),
                                   np.tile(color, (k, 1)))


def push_scene(with_splats=False):
    """Three objects on the table and a closed gripper pushing ``a`` into ``c``."""
    h = CUBE_HALF
    box = box_mesh((h, h, h))
    sa = cube_splats(h, 3, (0.8, 0.2, 0.2)) if with_splats else None
    sb = cube_splats(h, 3, (0.2, 0.8, 0.2)) if with_splats else None
    objects = [
        ObjectAsset.create("a", box, sa, PhysicalParams(), RigidTransform.from_translation([0.3, 0.0, h])),
        ObjectAsset.create("b", box, sb, PhysicalParams(), RigidTransform.from_translation([0.3, 0.08, h])),
        ObjectAsset.create("c", box_mesh((0.02, 0.03, 0.02)), None, PhysicalParams(),
                           RigidTransform.from_translation([0.45, 0.0, 0.02])),
    ]
    world = WorldState(objects)
    agent = GripperAgent(pose=RigidTransform.from_translation([0.2, 0.0, 0.1]), open=False)
    actions = [Action([0.2, 0.0, 0.02], IDENTITY_Q, False),
               Action([0.36, 0.02, 0.02], IDENTITY_Q, False),
               Action([0.36, 0.02, 0.1], IDENTITY_Q, False)]
    return world, agent, actions


def pick_scene():
    """One cube, picked up, carried and set down by an open-then-closed gripper."""
    h = CUBE_HALF
    world = WorldState([ObjectAsset.create("cube", box_mesh((h, h, h)), None, PhysicalParams(),
                                           RigidTransform.from_translation([0.3, 0.0, h]))])
    agent = GripperAgent(pose=RigidTransform.from_translation([0.3, 0.0, 0.2]))
    q = IDENTITY_Q
    actions = [Action([0.3, 0.0, h], q, True), Action([0.3, 0.0, h], q, False),
               Action([0.3, 0.0, 0.12], q, False), Action([0.4, 0.1, 0.12], rotz(0.5), False),
               Action([0.4, 0.1, h + 0.001], rotz(0.5), False), Action([0.4, 0.1, h + 0.001], rotz(0.5), True),
               Action([0.4, 0.1, 0.15], rotz(0.5), True)]
    return world, agent, actions


def front_camera(size=128):
    cam = CameraIntrinsics(size * 1.1, size * 1.1, size / 2, size / 2, size, size)
    return Camera("front", cam, CameraPose.look_at([0.85, 0.0, 0.45], [0.35, 0.0, 0.0]))


def raycast_sphere(cam: CameraIntrinsics, pose: CameraPose, center, radius, color=(0.6, 0.6, 0.6)):
    """Exact depth image of a sphere (camera-frame z of the first ray hit, 0 on a miss)."""
    from splatworld.core import RgbdImage

    vs, us = np.mgrid[0:cam.height, 0:cam.width]
    dirs = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones(us.shape)], axis=-1)
    c = pose.camera_from_world.apply(np.asarray(center, dtype=np.float64))
    # |t d - c|^2 = r^2 with z = t (d has unit z component)
    a = np.einsum("hwc,hwc->hw", dirs, dirs)
    b = -2.0 * dirs @ c
    disc = b * b - 4 * a * (c @ c - radius**2)
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
    depth = np.where(hit & (t > 0), t, 0.0)
    rgb = np.where((depth > 0)[..., None], np.asarray(color), 0.0)
    return RgbdImage(rgb, depth)


def plane_with_outliers(rng, n=1000, outlier_fraction=0.3, z=0.5, noise=0.001, extent=0.5):
    n_out = int(round(n * outlier_fraction))
    inl = np.c_[rng.uniform(-extent, extent, (n - n_out, 2)), z + rng.normal(0, noise, n - n_out)]
    out = rng.uniform(-extent, extent, (n_out, 3)) + [0, 0, z]
    return np.vstack([inl, out])


def write_push_dataset(root, camera_size=128):
    """Scene file, recorded push demo and frames-free layout for CLI runs; returns the paths."""
    from pathlib import Path

    from splatworld import io
    from splatworld.augment import record_demo

    root = Path(root)
    world, agent, actions = push_scene(with_splats=True)
    scene = io.Scene(world, [front_camera(camera_size)], agent)
    io.save_scene(scene, root / "scene.json")
    demo = record_demo(world, agent, actions, "push")
    io.save_demo(demo, root / "demos" / "push.json")
    return root / "scene.json", root / "demos"
