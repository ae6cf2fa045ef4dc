"""Splat containers, rigid attachment to bodies, initialization and point filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..core import (
    CameraIntrinsics,
    CameraPose,
    RgbdImage,
    RigidTransform,
    quat_from_matrix,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    unproject_points,
)
from ..errors import DimensionMismatch, NoValidPixels

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
MAX_SH_DEGREE = 1


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh0_to_rgb(sh0):
    return 0.5 + SH_C0 * np.asarray(sh0, dtype=np.float64)


def sh_basis(degree, dirs):
    """Real SH basis values ``(N, K)`` for unit view directions ``(N, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    cols = [np.full(dirs.shape[0], SH_C0)]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class Gaussian2D:
    p: np.ndarray
    r: np.ndarray
    s: np.ndarray
    alpha: float
    c: np.ndarray


@dataclass(frozen=True)
class GaussianSet:
    """Structure-of-arrays storage for 2D Gaussian disks.

    ``means (N,3)``, ``quats (N,4)`` w-first, ``scales (N,2)`` in meters,
    ``opacities (N,)`` in [0, 1], ``sh (N,K,3)`` with ``K = (degree+1)**2``.
    The third column of each rotation matrix is the disk normal.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 2)
        opac = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        sh = sh.reshape(n, sh.shape[-2] if sh.ndim == 3 else -1, 3)
        k = sh.shape[1]
        if k not in [(d + 1) ** 2 for d in range(MAX_SH_DEGREE + 1)]:
            raise ValueError(f"unsupported number of SH coefficients {k}")
        for name, arr in [("means", means), ("quats", quats), ("scales", scales),
                          ("opacities", opac), ("sh", sh)]:
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, sh_degree=0):
        k = (sh_degree + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_colors(cls, means, quats, scales, opacities, rgb, sh_degree=0):
        rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
        sh = np.zeros((rgb.shape[0], (sh_degree + 1) ** 2, 3))
        sh[:, 0] = rgb_to_sh0(rgb)
        return cls(means, quats, scales, opacities, sh)

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        if not sets:
            return cls.empty()
        k = max(s.sh.shape[1] for s in sets)
        shs = []
        for s in sets:
            pad = np.zeros((len(s), k, 3))
            pad[:, : s.sh.shape[1]] = s.sh
            shs.append(pad)
        return cls(
            np.concatenate([s.means for s in sets]),
            np.concatenate([s.quats for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate(shs),
        )

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Gaussian2D(self.means[idx], self.quats[idx], self.scales[idx],
                              float(self.opacities[idx]), self.sh[idx])
        return GaussianSet(self.means[idx], self.quats[idx], self.scales[idx],
                           self.opacities[idx], self.sh[idx])

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def base_colors(self):
        """View-independent (DC) colors ``(N, 3)``."""
        return sh0_to_rgb(self.sh[:, 0])

    def replace(self, **kw):
        fields = dict(means=self.means, quats=self.quats, scales=self.scales,
                      opacities=self.opacities, sh=self.sh)
        fields.update(kw)
        return GaussianSet(**fields)

    def normals(self):
        return quat_to_matrix(self.quats)[:, :, 2]


def world_splats(asset_pose: RigidTransform, splats: GaussianSet) -> GaussianSet:
    """Express object-local splats in the world frame of a body at ``asset_pose``."""
    if len(splats) == 0:
        return splats
    return splats.replace(
        means=asset_pose.apply(splats.means),
        quats=quat_normalize(quat_multiply(asset_pose.rotation[None, :], splats.quats)),
    )


def _facing_rotations(normals, cam_x):
    """Rotations whose third column is ``normals``; first column follows ``cam_x``."""
    tu = cam_x[None, :] - (normals @ cam_x)[:, None] * normals
    bad = np.linalg.norm(tu, axis=1) < 1e-9
    if np.any(bad):
        alt = np.cross(normals[bad], [0.0, 0.0, 1.0])
        tu[bad] = alt
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(normals, tu)
    mats = np.stack([tu, tv, normals], axis=2)
    return np.stack([quat_from_matrix(m) for m in mats]) if len(mats) else np.zeros((0, 4))


def init_from_rgbd(frames, stride: int = 1, sh_degree: int = 0) -> GaussianSet:
    """Seed one splat per sampled, masked, valid-depth pixel.

    ``frames`` is a sequence of ``(RgbdImage, mask, CameraIntrinsics, CameraPose)``.
    Disk radius follows the pixel footprint ``depth * stride / fx``, clamped to
    ``[1e-4, 0.05]`` m, and each disk faces its source camera.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    if not frames:
        raise NoValidPixels("no frames given")
    parts = []
    for image, mask, cam, pose in frames:
        image: RgbdImage
        cam: CameraIntrinsics
        pose: CameraPose
        mask = np.asarray(mask).astype(bool)
        if mask.shape != image.depth.shape:
            raise DimensionMismatch(f"mask {mask.shape} vs image {image.depth.shape}")
        sel = np.zeros_like(mask)
        sel[::stride, ::stride] = True
        sel &= mask & image.valid
        vs, us = np.nonzero(sel)
        if len(vs) == 0:
            continue
        depth = image.depth[vs, us]
        pts = unproject_points(us, vs, depth, cam, pose)
        normals = pose.center[None, :] - pts
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        cam_x = pose.world_from_camera.rotation_matrix[:, 0]
        quats = _facing_rotations(normals, cam_x)
        s = np.clip(depth * stride / cam.fx, 1e-4, 0.05)
        parts.append(GaussianSet.from_colors(
            pts, quats, np.stack([s, s], axis=1), np.full(len(s), 0.5),
            image.rgb[vs, us], sh_degree=sh_degree))
    if not parts:
        raise NoValidPixels("masks cover no valid depth")
    return GaussianSet.concatenate(parts)


def _centers(points_or_splats):
    if isinstance(points_or_splats, GaussianSet):
        return points_or_splats.means
    return np.asarray(points_or_splats, dtype=np.float64).reshape(-1, 3)


def radius_outlier_mask(points, radius: float, min_neighbors: int):
    """Boolean keep-mask: at least ``min_neighbors`` others within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = _centers(points)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    counts = cKDTree(points).query_ball_point(points, r=radius, return_length=True)
    return (np.asarray(counts) - 1) >= min_neighbors


def filter_radius_outliers(points_or_splats, radius: float, min_neighbors: int):
    keep = radius_outlier_mask(points_or_splats, radius, min_neighbors)
    if isinstance(points_or_splats, GaussianSet):
        return points_or_splats[keep]
    return _centers(points_or_splats)[keep]


def dedup_background(scene_set: GaussianSet, object_sets, radius: float) -> GaussianSet:
    """Drop scene splats that have an object splat within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    object_sets = [s for s in object_sets if len(s)]
    if not object_sets or len(scene_set) == 0:
        return scene_set
    tree = cKDTree(np.concatenate([s.means for s in object_sets]))
    dist, _ = tree.query(scene_set.means, k=1)
    return scene_set[dist > radius]
