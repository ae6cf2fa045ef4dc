"""Depth-supervised fitting of object splats to masked RGB-D views.

The objective is ``L = L_rec + lambda_n * L_n + lambda_depth * L_depth`` with

* ``L_rec``: mean absolute RGB error over masked pixels,
* ``L_depth``: mean absolute depth error over masked pixels where both the
  observed and the rendered depth are valid,
* ``L_n``: mean ``1 - n . N`` over those pixels, ``n`` the weight-averaged disk
  normal and ``N`` the normal of the observed depth map (central differences).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, CameraPose, RgbdImage, quat_exp, quat_multiply, quat_normalize
from .errors import DimensionMismatch, EmptyMask, NoFrames
from .splat import GaussianSet, RenderOptions, backward, render_buffers
from .splat.raster import Buffers, SplatGrads

log = logging.getLogger(__name__)

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 7000
    lambda_normal: float = 0.05
    lambda_depth: float = 1.0
    # Adam step sizes; scale and opacity are optimized in log / logit space
    lr_means: float = 2e-4
    lr_rotation: float = 2e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 2e-2
    lr_color: float = 5e-3
    prune_opacity_floor: float = 0.02
    prune_color_floor: float = 0.02
    batch: int = 1
    seed: int = 0
    render: RenderOptions = field(default_factory=lambda: RenderOptions(supersample_factor=1))

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lambda_normal < 0 or self.lambda_depth < 0:
            raise ValueError("loss weights must be non-negative")
        steps = [self.lr_means, self.lr_rotation, self.lr_scale, self.lr_opacity, self.lr_color]
        if min(steps) <= 0:
            raise ValueError("step sizes must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_n: float
    l_depth: float
    total: float


@dataclass(frozen=True)
class TrainingView:
    """One masked observation with its camera."""

    image: RgbdImage
    mask: np.ndarray
    cam: CameraIntrinsics
    pose: CameraPose

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != self.image.depth.shape:
            raise DimensionMismatch(f"mask {mask.shape} vs image {self.image.depth.shape}")
        if (self.cam.height, self.cam.width) != mask.shape:
            raise DimensionMismatch("camera resolution does not match the image")
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class ActiveSet:
    """Pixel sets each loss term averages over.

    The optional sign arrays pin the branch of each absolute residual; when given,
    ``|r|`` is evaluated as ``sign * r``. The optional ``order`` pins the compositing
    order, whose changes are jumps of the loss rather than slopes.
    """

    rec: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    rec_sign: np.ndarray | None = None
    depth_sign: np.ndarray | None = None
    order: np.ndarray | None = None

    def pinned(self, ev: "Evaluation") -> "ActiveSet":
        """This set with residual signs and compositing order frozen at the evaluation ``ev``."""
        return ActiveSet(self.rec, self.depth, self.normal, ev.rec_sign, ev.depth_sign, ev.order)


def mask_frame(frame: RgbdImage, mask, background=(0.0, 0.0, 0.0)) -> RgbdImage:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != frame.depth.shape:
        raise DimensionMismatch(f"mask {mask.shape} vs frame {frame.depth.shape}")
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.where(mask[..., None], frame.rgb, bg)
    return RgbdImage(rgb, np.where(mask, frame.depth, 0.0))


def depth_normals(depth, cam: CameraIntrinsics):
    """Camera-frame unit normals of a depth map and their validity mask.

    Normals use central differences of back-projected points and face the camera.
    """
    h, w = depth.shape
    vs, us = np.mgrid[0:h, 0:w]
    pts = np.stack([(us - cam.cx) / cam.fx * depth, (vs - cam.cy) / cam.fy * depth, depth], axis=-1)
    valid = depth > 0
    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    inner = valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    inner &= norm > 0
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing = np.einsum("hwc,hwc->hw", n, pts[1:-1, 1:-1])
    n = np.where((facing > 0)[..., None], -n, n)
    normals[1:-1, 1:-1] = n
    ok[1:-1, 1:-1] = inner
    return normals, ok


def active_set(view: TrainingView, buf: Buffers, gt_normal_ok=None) -> ActiveSet:
    if gt_normal_ok is None:
        _, gt_normal_ok = depth_normals(view.image.depth, view.cam)
    rec = view.mask
    depth = rec & view.image.valid & buf.depth_valid
    return ActiveSet(rec, depth, depth & gt_normal_ok)


@dataclass
class Evaluation:
    loss: LossBreakdown
    buffers: Buffers
    active: ActiveSet
    rec_sign: np.ndarray
    depth_sign: np.ndarray
    order: np.ndarray
    grads: SplatGrads | None = None


def evaluate(splats: GaussianSet, view: TrainingView, cfg: FitConfig, *, with_grads=False,
             active: ActiveSet | None = None) -> Evaluation:
    """Loss (and optionally its gradients) of ``splats`` on one view.

    ``active`` freezes the pixel sets of the depth and normal terms (and, when pinned,
    residual signs and compositing order), which is how a finite-difference check
    differentiates the smooth piece the analytic gradient describes.
    """
    if not view.mask.any():
        raise EmptyMask("mask selects no pixels")
    opts = cfg.render
    order = None if active is None else active.order
    proj, buf = render_buffers(splats, view.cam, view.pose, opts, order=order)
    gt_n, gt_n_ok = depth_normals(view.image.depth, view.cam)
    if active is None:
        active = active_set(view, buf, gt_n_ok)

    gt_rgb = view.image.rgb
    gt_d = view.image.depth
    n_rec = int(active.rec.sum())
    diff = buf.color - gt_rgb
    rec_sign = np.sign(diff) if active.rec_sign is None else active.rec_sign
    l_rec = float((rec_sign * diff)[active.rec].sum() / (3 * n_rec))

    w_safe = np.where(buf.weight > 0, buf.weight, 1.0)
    depth = buf.depth_num / w_safe
    n_d = int(active.depth.sum())
    ddiff = depth - gt_d
    depth_sign = np.sign(ddiff) if active.depth_sign is None else active.depth_sign
    l_depth = float((depth_sign * ddiff)[active.depth].sum() / n_d) if n_d else 0.0

    normal = buf.normal_num / w_safe[..., None]
    cos = np.einsum("hwc,hwc->hw", normal, gt_n)
    n_n = int(active.normal.sum())
    l_n = float((1.0 - cos[active.normal]).sum() / n_n) if n_n else 0.0

    total = l_rec + cfg.lambda_normal * l_n + cfg.lambda_depth * l_depth
    ev = Evaluation(LossBreakdown(l_rec, l_n, l_depth, total), buf, active, rec_sign, depth_sign, proj.order)
    if not with_grads:
        return ev

    g_color = np.where(active.rec[..., None], rec_sign, 0.0) / (3 * n_rec)
    g_weight = np.zeros_like(buf.weight)
    g_dnum = np.zeros_like(buf.weight)
    g_nnum = np.zeros_like(buf.normal_num)
    if n_d:
        gd = np.where(active.depth, depth_sign, 0.0) * (cfg.lambda_depth / n_d)
        g_dnum += gd / w_safe
        g_weight -= gd * depth / w_safe
    if n_n:
        sel = active.normal * (cfg.lambda_normal / n_n)
        g_nnum -= (sel / w_safe)[..., None] * gt_n
        g_weight += sel * cos / w_safe
    ev.grads = backward(splats, proj, view.cam, view.pose, opts, g_color, g_weight, g_dnum, g_nnum)
    return ev


def loss(splats: GaussianSet, view: TrainingView, cfg: FitConfig | None = None) -> LossBreakdown:
    return evaluate(splats, view, cfg or FitConfig()).loss


def loss_gradients(splats: GaussianSet, view: TrainingView, cfg: FitConfig | None = None) -> SplatGrads:
    return evaluate(splats, view, cfg or FitConfig(), with_grads=True).grads


def prune(splats: GaussianSet, cfg: FitConfig | None = None) -> GaussianSet:
    """Drop near-transparent and near-black splats, keeping survivor order."""
    cfg = cfg or FitConfig()
    luma = np.clip(splats.base_colors, 0.0, 1.0) @ LUMA
    keep = (splats.opacities >= cfg.prune_opacity_floor) & (luma >= cfg.prune_color_floor)
    return splats[keep]


@dataclass
class FitResult:
    splats: GaussianSet
    history: list
    initial_loss: float
    final_loss: float


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def mean_loss(splats, views, cfg) -> float:
    return float(np.mean([evaluate(splats, v, cfg).loss.total for v in views]))


def optimize(views, init: GaussianSet, cfg: FitConfig | None = None, progress=None) -> FitResult:
    """Adam on all splat parameters, then pruning.

    Deterministic for a given ``cfg.seed``. If the final training loss ends up above
    the initial one the initial set is returned (before pruning).
    """
    cfg = cfg or FitConfig()
    views = list(views)
    if not views:
        raise NoFrames("optimize needs at least one view")
    rng = np.random.default_rng(cfg.seed)
    means = init.means.copy()
    quats = init.quats.copy()
    log_s = np.log(init.scales)
    logit_a = _logit(init.opacities)
    sh = init.sh.copy()
    opt = {
        "means": _Adam(means.shape, cfg.lr_means),
        "rot": _Adam((len(init), 3), cfg.lr_rotation),
        "scale": _Adam(log_s.shape, cfg.lr_scale),
        "opac": _Adam(logit_a.shape, cfg.lr_opacity),
        "sh": _Adam(sh.shape, cfg.lr_color),
    }
    initial = mean_loss(init, views, cfg)
    history = []
    queue = []
    for it in range(cfg.iterations):
        batch = []
        for _ in range(min(cfg.batch, len(views))):
            if not queue:
                queue = list(rng.permutation(len(views)))
            batch.append(views[queue.pop()])
        current = GaussianSet(means, quats, np.exp(log_s), _sigmoid(logit_a), sh)
        total = 0.0
        g = None
        for view in batch:
            ev = evaluate(current, view, cfg, with_grads=True)
            total += ev.loss.total / len(batch)
            if g is None:
                g = ev.grads
            else:
                g = SplatGrads(g.means + ev.grads.means, g.rotations + ev.grads.rotations,
                               g.scales + ev.grads.scales, g.opacities + ev.grads.opacities,
                               g.sh + ev.grads.sh)
        history.append(total)
        k = 1.0 / len(batch)
        means = means - opt["means"].step(g.means * k)
        delta = -opt["rot"].step(g.rotations * k)
        quats = quat_normalize(quat_multiply(quat_exp(delta), quats))
        s = np.exp(log_s)
        log_s = log_s - opt["scale"].step(g.scales * s * k)
        a = _sigmoid(logit_a)
        logit_a = logit_a - opt["opac"].step(g.opacities * a * (1 - a) * k)
        sh = sh - opt["sh"].step(g.sh * k)
        if progress is not None:
            progress(it, total)

    fitted = GaussianSet(means, quats, np.exp(log_s), _sigmoid(logit_a), sh)
    final = mean_loss(fitted, views, cfg)
    if final > initial:
        log.warning("fit ended above its initial loss (%.6g > %.6g); keeping the input", final, initial)
        fitted, final = init, initial
    return FitResult(prune(fitted, cfg), history, initial, final)
