"""Deterministic tile-based CPU rasterizer for 2D Gaussian disks, with its adjoint.

Each disk is projected with the local affine approximation of the perspective
map at its center, which turns it into a 2D screen-space Gaussian with covariance
``M M^T + 0.3 I`` (``M`` = projected tangent axes scaled by the disk semi-axes).
The footprint kernel is ``exp(-q/2)`` minus its tangent line at the 3-sigma ellipse
``q = 9``, rescaled to 1 at the center and zero beyond the ellipse. Value and slope
both vanish at the cutoff, so the loss stays continuously differentiable when a
pixel enters or leaves a footprint.

Splats are composited front to back in a single global order (camera depth of
the center, ties by index). Per pixel the composite only depends on that order,
so the result is bit-identical for any tile size or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..core import CameraIntrinsics, CameraPose, RgbdImage, quat_to_matrix
from .model import SH_C1, GaussianSet, sh_basis, world_splats

LOWPASS = 0.3
CUTOFF_Q = 9.0
_E_CUT = float(np.exp(-0.5 * CUTOFF_Q))
_KERNEL_NORM = 1.0 / (1.0 - _E_CUT * (1.0 + 0.5 * CUTOFF_Q))
NEAR = 0.01
DEPTH_VALID_WEIGHT = 0.5


@dataclass(frozen=True)
class RenderOptions:
    supersample_factor: int = 4
    opacity_floor: float = 1.0 / 255.0
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.supersample_factor < 1:
            raise ValueError("supersample_factor must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")


def footprint(q):
    tangent = _E_CUT * (1.0 + 0.5 * (CUTOFF_Q - q))
    return np.where(q < CUTOFF_Q, (np.exp(-0.5 * q) - tangent) * _KERNEL_NORM, 0.0)


def footprint_grad(q):
    return np.where(q < CUTOFF_Q, 0.5 * (_E_CUT - np.exp(-0.5 * q)) * _KERNEL_NORM, 0.0)


def assemble(scene) -> GaussianSet:
    """Flatten a scene into one world-frame set; order defines the global splat index.

    Accepts a ``GaussianSet`` or a sequence whose items are sets or
    ``(GaussianSet, RigidTransform)`` pairs.
    """
    if isinstance(scene, GaussianSet):
        return scene
    parts = []
    for item in scene:
        if isinstance(item, GaussianSet):
            parts.append(item)
        else:
            splats, pose = item
            parts.append(world_splats(pose, splats) if pose is not None else splats)
    return GaussianSet.concatenate(parts)


@dataclass
class Projected:
    """Per-splat screen-space quantities for one camera (all arrays length N)."""

    visible: np.ndarray
    p_cam: np.ndarray
    axes_cam: np.ndarray
    jac: np.ndarray
    span: np.ndarray
    mat: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    depth: np.ndarray
    flip: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    view_dir: np.ndarray
    view_dist: np.ndarray
    bbox: np.ndarray
    order: np.ndarray
    sh_basis: np.ndarray = field(repr=False)


def project_splats(splats: GaussianSet, cam: CameraIntrinsics, pose: CameraPose, order=None) -> Projected:
    """Screen-space quantities of every splat.

    ``order`` overrides the compositing order (a permutation of splat indices); by
    default splats are sorted by camera depth of their centers, ties by index.
    """
    n = len(splats)
    wfc = pose.world_from_camera
    rwc = wfc.rotation_matrix
    p_cam = (splats.means - wfc.translation) @ rwc
    rot = quat_to_matrix(splats.quats) if n else np.zeros((0, 3, 3))
    axes_cam = np.einsum("ji,njk->nik", rwc, rot)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    visible = z > NEAR
    zs = np.where(visible, z, 1.0)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)
    span = axes_cam[:, :, :2] * splats.scales[:, None, :]
    mat = jac @ span
    cov = mat @ mat.transpose(0, 2, 1)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = np.sqrt(CUTOFF_Q * lam)
    bbox = np.stack([
        np.ceil(mean2d[:, 0] - radius), np.floor(mean2d[:, 0] + radius),
        np.ceil(mean2d[:, 1] - radius), np.floor(mean2d[:, 1] + radius),
    ], axis=1) if n else np.zeros((0, 4))
    bbox[:, 0] = np.maximum(bbox[:, 0], 0)
    bbox[:, 1] = np.minimum(bbox[:, 1], cam.width - 1)
    bbox[:, 2] = np.maximum(bbox[:, 2], 0)
    bbox[:, 3] = np.minimum(bbox[:, 3], cam.height - 1)
    bbox = bbox.astype(np.int64)
    visible &= (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])

    tn = axes_cam[:, :, 2]
    flip = np.where(np.einsum("ni,ni->n", tn, p_cam) > 0.0, -1.0, 1.0)
    normal = tn * flip[:, None]

    offs = splats.means - wfc.translation
    dist = np.linalg.norm(offs, axis=1)
    dirs = offs / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(splats.sh_degree, dirs)
    color = 0.5 + np.einsum("nk,nkc->nc", basis, splats.sh)

    idx = np.arange(n)
    order = np.lexsort((idx, z)) if order is None else np.asarray(order, dtype=np.int64)
    order = order[visible[order]]
    return Projected(visible, p_cam, axes_cam, jac, span, mat, conic, mean2d, z, flip,
                     normal, color, splats.opacities.copy(), dirs, dist, bbox, order, basis)


@dataclass
class Buffers:
    """Accumulated per-pixel quantities; the renderer's outputs are functions of these."""

    color: np.ndarray
    weight: np.ndarray
    depth_num: np.ndarray
    normal_num: np.ndarray
    transmittance: np.ndarray

    @property
    def depth_valid(self):
        return self.weight >= DEPTH_VALID_WEIGHT

    @property
    def depth(self):
        ok = self.depth_valid
        return np.where(ok, self.depth_num / np.where(ok, self.weight, 1.0), 0.0)

    @property
    def normal(self):
        w = np.where(self.weight > 0, self.weight, 1.0)
        return self.normal_num / w[..., None]

    def image(self) -> RgbdImage:
        return RgbdImage(self.color, self.depth)


def _tiles(cam, tile):
    for y0 in range(0, cam.height, tile):
        for x0 in range(0, cam.width, tile):
            yield x0, min(x0 + tile, cam.width), y0, min(y0 + tile, cam.height)


def _tile_splats(proj, x0, x1, y0, y1):
    bb = proj.bbox[proj.order]
    hit = (bb[:, 0] < x1) & (bb[:, 1] >= x0) & (bb[:, 2] < y1) & (bb[:, 3] >= y0)
    return proj.order[hit]


def _tile_alpha(proj, ids, px, py, floor):
    dx = px[None, :] - proj.mean2d[ids, 0][:, None]
    dy = py[None, :] - proj.mean2d[ids, 1][:, None]
    ca = proj.conic[ids, 0, 0][:, None]
    cb = proj.conic[ids, 0, 1][:, None]
    cc = proj.conic[ids, 1, 1][:, None]
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    g = footprint(q)
    a = proj.opacity[ids][:, None] * g
    a = np.where(a >= floor, a, 0.0) if floor > 0 else a
    keep = 1.0 - a
    cum = np.cumprod(keep, axis=0)
    trans = np.concatenate([np.ones((1, px.size)), cum[:-1]], axis=0)
    return dx, dy, q, g, a, trans, cum[-1]


def _composite_tile(proj, bg, floor, rect):
    x0, x1, y0, y1 = rect
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    ids = _tile_splats(proj, x0, x1, y0, y1)
    npx = px.size
    if ids.size == 0:
        return (rect, np.tile(bg, (npx, 1)), np.zeros(npx), np.zeros(npx),
                np.zeros((npx, 3)), np.ones(npx))
    _, _, _, _, a, trans, t_final = _tile_alpha(proj, ids, px, py, floor)
    w = a * trans
    color = np.cumsum(w[:, :, None] * proj.color[ids][:, None, :], axis=0)[-1] + t_final[:, None] * bg
    weight = np.cumsum(w, axis=0)[-1]
    depth_num = np.cumsum(w * proj.depth[ids][:, None], axis=0)[-1]
    normal_num = np.cumsum(w[:, :, None] * proj.normal[ids][:, None, :], axis=0)[-1]
    return rect, color, weight, depth_num, normal_num, t_final


def composite(proj: Projected, cam: CameraIntrinsics, opts: RenderOptions, threads: int = 1) -> Buffers:
    h, w = cam.height, cam.width
    bg = np.asarray(opts.background, dtype=np.float64)
    out = Buffers(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w)))
    rects = list(_tiles(cam, opts.tile_size))

    def work(rect):
        return _composite_tile(proj, bg, opts.opacity_floor, rect)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, rects))
    else:
        results = [work(r) for r in rects]
    for (x0, x1, y0, y1), color, weight, dnum, nnum, tf in results:
        shape = (y1 - y0, x1 - x0)
        out.color[y0:y1, x0:x1] = color.reshape(shape + (3,))
        out.weight[y0:y1, x0:x1] = weight.reshape(shape)
        out.depth_num[y0:y1, x0:x1] = dnum.reshape(shape)
        out.normal_num[y0:y1, x0:x1] = nnum.reshape(shape + (3,))
        out.transmittance[y0:y1, x0:x1] = tf.reshape(shape)
    return out


def render_buffers(splats: GaussianSet, cam, pose, opts=None, threads=1, order=None):
    opts = opts or RenderOptions()
    proj = project_splats(splats, cam, pose, order)
    return proj, composite(proj, cam, opts, threads)


def rasterize(scene, cam: CameraIntrinsics, pose: CameraPose, opts: RenderOptions | None = None,
              threads: int = 1) -> RgbdImage:
    """Render the scene at the camera's native resolution.

    ``scene`` is anything ``assemble`` accepts. An empty scene yields the background
    color with invalid depth everywhere.
    """
    opts = opts or RenderOptions()
    splats = assemble(scene)
    _, buf = render_buffers(splats, cam, pose, opts, threads)
    return buf.image()


def resized_intrinsics(cam: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    sx = width / cam.width
    sy = height / cam.height
    return CameraIntrinsics(cam.fx * sx, cam.fy * sy, (cam.cx + 0.5) * sx - 0.5,
                            (cam.cy + 0.5) * sy - 0.5, width, height)


def box_downsample(image: RgbdImage, factor: int) -> RgbdImage:
    """Average ``factor x factor`` blocks; depth averages valid pixels only."""
    if factor == 1:
        return image
    h, w = image.height // factor, image.width // factor
    rgb = image.rgb.reshape(h, factor, w, factor, 3).mean(axis=(1, 3))
    d = image.depth.reshape(h, factor, w, factor)
    valid = d > 0
    cnt = valid.sum(axis=(1, 3))
    tot = np.where(valid, d, 0.0).sum(axis=(1, 3))
    depth = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    return RgbdImage(rgb, depth)


def render_downsampled(scene, cam: CameraIntrinsics, pose: CameraPose, target_w: int, target_h: int,
                       opts: RenderOptions | None = None, threads: int = 1) -> RgbdImage:
    """Render at ``supersample_factor`` times the target resolution and box-filter down."""
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    opts = opts or RenderOptions()
    k = opts.supersample_factor
    target = resized_intrinsics(cam, target_w, target_h)
    hi = rasterize(scene, target.scaled(k), pose, opts, threads)
    return box_downsample(hi, k)


# ---------------------------------------------------------------------------
# adjoint


@dataclass
class SplatGrads:
    """Loss gradients per splat. ``rotations`` is w.r.t. a left tangent step exp(d) * r."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def flat(self):
        return np.concatenate([self.means.ravel(), self.rotations.ravel(), self.scales.ravel(),
                               self.opacities.ravel(), self.sh.ravel()])


def backward(splats: GaussianSet, proj: Projected, cam: CameraIntrinsics, pose: CameraPose,
             opts: RenderOptions, g_color, g_weight, g_depth_num, g_normal_num) -> SplatGrads:
    """Propagate gradients w.r.t. the accumulated buffers back to splat parameters.

    ``g_color (H,W,3)``, ``g_weight (H,W)``, ``g_depth_num (H,W)``, ``g_normal_num (H,W,3)``
    are dL/d of the corresponding ``Buffers`` fields.
    """
    n = len(splats)
    bg = np.asarray(opts.background, dtype=np.float64)
    floor = opts.opacity_floor
    d_color = np.zeros((n, 3))
    d_depth = np.zeros(n)
    d_normal = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))

    for rect in _tiles(cam, opts.tile_size):
        x0, x1, y0, y1 = rect
        ids = _tile_splats(proj, x0, x1, y0, y1)
        if ids.size == 0:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs.ravel().astype(np.float64)
        py = ys.ravel().astype(np.float64)
        gc = g_color[y0:y1, x0:x1].reshape(-1, 3)
        gw = g_weight[y0:y1, x0:x1].ravel()
        gd = g_depth_num[y0:y1, x0:x1].ravel()
        gn = g_normal_num[y0:y1, x0:x1].reshape(-1, 3)
        if not (gc.any() or gw.any() or gd.any() or gn.any()):
            continue
        dx, dy, q, g, a, trans, _ = _tile_alpha(proj, ids, px, py, floor)
        w = a * trans

        # per-splat "value" seen by the loss at each pixel
        y_val = (proj.color[ids] @ gc.T) + gw[None, :] + proj.depth[ids][:, None] * gd[None, :] \
            + proj.normal[ids] @ gn.T
        behind = gc @ bg
        g_a = np.empty_like(a)
        for k in range(len(ids) - 1, -1, -1):
            g_a[k] = trans[k] * (y_val[k] - behind)
            behind = a[k] * y_val[k] + (1.0 - a[k]) * behind

        d_color[ids] += w @ gc
        d_depth[ids] += w @ gd
        d_normal[ids] += w @ gn
        g_a = np.where(a > 0, g_a, 0.0)
        d_opac[ids] += (g_a * g).sum(axis=1)
        g_q = g_a * proj.opacity[ids][:, None] * footprint_grad(q)
        ca = proj.conic[ids, 0, 0][:, None]
        cb = proj.conic[ids, 0, 1][:, None]
        cc = proj.conic[ids, 1, 1][:, None]
        d_mean2d[ids, 0] -= (g_q * (2.0 * ca * dx + 2.0 * cb * dy)).sum(axis=1)
        d_mean2d[ids, 1] -= (g_q * (2.0 * cb * dx + 2.0 * cc * dy)).sum(axis=1)
        d_conic[ids, 0, 0] += (g_q * dx * dx).sum(axis=1)
        dxy = (g_q * dx * dy).sum(axis=1)
        d_conic[ids, 0, 1] += dxy
        d_conic[ids, 1, 0] += dxy
        d_conic[ids, 1, 1] += (g_q * dy * dy).sum(axis=1)

    return _chain_to_params(splats, proj, cam, pose, d_color, d_depth, d_normal, d_opac, d_mean2d, d_conic)


def _chain_to_params(splats, proj, cam, pose, d_color, d_depth, d_normal, d_opac, d_mean2d, d_conic):
    conic = proj.conic
    d_cov = -conic @ d_conic @ conic
    d_mat = (d_cov + d_cov.transpose(0, 2, 1)) @ proj.mat
    d_jac = d_mat @ proj.span.transpose(0, 2, 1)
    d_span = proj.jac.transpose(0, 2, 1) @ d_mat

    axes = proj.axes_cam
    d_axes = np.zeros_like(axes)
    d_axes[:, :, 0] = d_span[:, :, 0] * splats.scales[:, 0:1]
    d_axes[:, :, 1] = d_span[:, :, 1] * splats.scales[:, 1:2]
    d_axes[:, :, 2] = d_normal * proj.flip[:, None]
    d_scales = np.stack([
        np.einsum("ni,ni->n", d_span[:, :, 0], axes[:, :, 0]),
        np.einsum("ni,ni->n", d_span[:, :, 1], axes[:, :, 1]),
    ], axis=1)

    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    z = np.where(proj.visible, proj.p_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    d_pc = np.einsum("nij,ni->nj", proj.jac, d_mean2d)
    d_pc[:, 0] += d_jac[:, 0, 2] * (-fx / z**2)
    d_pc[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
    d_pc[:, 2] += (d_jac[:, 0, 0] * (-fx / z**2) + d_jac[:, 0, 2] * (2.0 * fx * x / z**3)
                   + d_jac[:, 1, 1] * (-fy / z**2) + d_jac[:, 1, 2] * (2.0 * fy * y / z**3))
    d_pc[:, 2] += d_depth
    d_pc[~proj.visible] = 0.0
    d_axes[~proj.visible] = 0.0
    d_scales[~proj.visible] = 0.0

    rwc = pose.world_from_camera.rotation_matrix
    d_means = d_pc @ rwc.T
    # camera-frame axes are R_wc^T R, so world-axis gradients rotate back
    d_axes_w = np.einsum("ij,njk->nik", rwc, d_axes)
    axes_w = np.einsum("ij,njk->nik", rwc, axes)
    d_rot = sum(np.cross(axes_w[:, :, j], d_axes_w[:, :, j]) for j in range(3))

    d_sh = proj.sh_basis[:, :, None] * d_color[:, None, :]
    if splats.sh_degree >= 1:
        sh = splats.sh
        d_dir = np.stack([
            -SH_C1 * np.einsum("nc,nc->n", d_color, sh[:, 3]),
            -SH_C1 * np.einsum("nc,nc->n", d_color, sh[:, 1]),
            SH_C1 * np.einsum("nc,nc->n", d_color, sh[:, 2]),
        ], axis=1)
        vd = proj.view_dir
        radial = np.einsum("ni,ni->n", vd, d_dir)[:, None] * vd
        d_means += (d_dir - radial) / proj.view_dist[:, None]

    vis = proj.visible
    d_opac = np.where(vis, d_opac, 0.0)
    d_sh[~vis] = 0.0
    return SplatGrads(d_means, d_rot, d_scales, d_opac, d_sh)
