"""Rigid transforms, quaternions, pinhole cameras and RGB-D containers.

Conventions used everywhere in the package:

* right-handed world frame, +z up, gravity along -z;
* quaternions are ``(w, x, y, z)`` arrays, canonicalized to ``w >= 0``;
* pixel ``(u, v)`` has its center at integer coordinates, ``u`` indexes columns;
* depth 0 marks an invalid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DimensionMismatch, InvalidDepth

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    """Unit quaternion with ``w >= 0``; idempotent, so stored unit quaternions round-trip bit-exactly."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(np.abs(n - 1.0) <= 4 * np.finfo(np.float64).eps, q, q / n)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``). Broadcasts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion; accepts ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - w * z)
    m[..., 0, 2] = 2.0 * (x * z + w * y)
    m[..., 1, 0] = 2.0 * (x * y + w * z)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - w * x)
    m[..., 2, 0] = 2.0 * (x * z - w * y)
    m[..., 2, 1] = 2.0 * (y * z + w * x)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def quat_from_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return quat_normalize(np.concatenate([[np.cos(h)], np.sin(h) * axis]))


def quat_exp(v):
    """Quaternion of the rotation vector ``v`` (axis * angle). Broadcasts."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x, with its series near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, angle in ``[0, pi]``."""
    q = quat_normalize(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[0])
    return v * (angle / s)


def quat_angle(q):
    """Rotation angle of ``q`` in ``[0, pi]``."""
    q = quat_normalize(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), q[0])


def rotz(angle):
    return quat_from_axis_angle([0.0, 0.0, 1.0], angle)


def slerp(a, b, t):
    """Constant-speed spherical interpolation along the shorter arc."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    if np.dot(a, b) < 0.0:
        b = -b
    rel = quat_multiply(quat_conjugate(a), b)
    return quat_normalize(quat_multiply(a, quat_exp(t * quat_log_signed(rel))))


def quat_log_signed(q):
    """Like ``quat_log`` but keeps the sign of ``q`` (no canonicalization)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    return v * (2.0 * np.arctan2(s, q[0]) / s)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t with R stored as a unit quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(quat_normalize(self.rotation)))
        object.__setattr__(self, "translation", _frozen(self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, t):
        return cls(IDENTITY_QUAT, t)

    @classmethod
    def from_rotation(cls, q):
        return cls(q, np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform a point ``(3,)`` or a point array ``(N, 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def apply_vector(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation_matrix.T

    def inverse(self):
        qi = quat_conjugate(self.rotation)
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def __matmul__(self, other):
        return compose(self, other)

    def almost_equal(self, other, tol=1e-9):
        dq = min(
            np.abs(self.rotation - other.rotation).max(),
            np.abs(self.rotation + other.rotation).max(),
        )
        return dq <= tol and np.abs(self.translation - other.translation).max() <= tol


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: the transform applying ``b`` first, then ``a``."""
    return RigidTransform(
        quat_multiply(a.rotation, b.rotation),
        a.rotation_matrix @ b.translation + a.translation,
    )


def rotate_about_point(rotation, point) -> RigidTransform:
    """Transform ``x -> R (x - P) + P``."""
    point = np.asarray(point, dtype=np.float64)
    r = quat_to_matrix(quat_normalize(rotation))
    return RigidTransform(rotation, point - r @ point)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics of the same camera sampled ``factor`` times more densely.

        A pixel of the original image covers exactly a ``factor x factor`` block
        of the scaled one, so box-averaging the blocks recovers the original grid.
        """
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            self.width * factor,
            self.height * factor,
        )

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    world_from_camera: RigidTransform = field(default_factory=RigidTransform)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` with +z looking at ``target`` and -y roughly along ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [0.0, 1.0, 0.0] if abs(z[1]) < 0.9 else [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
        return cls(RigidTransform.from_matrix(m))

    @property
    def camera_from_world(self) -> RigidTransform:
        return self.world_from_camera.inverse()

    @property
    def center(self):
        return self.world_from_camera.translation

    def transformed(self, t: RigidTransform) -> CameraPose:
        return CameraPose(compose(t, self.world_from_camera))


def to_camera(points, pose: CameraPose):
    """World points ``(..., 3)`` expressed in the camera frame."""
    wfc = pose.world_from_camera
    return (np.asarray(points, dtype=np.float64) - wfc.translation) @ wfc.rotation_matrix


def project_points(points, cam: CameraIntrinsics, pose: CameraPose):
    """Vectorized pinhole projection; returns ``(u, v, z)`` arrays, no validity check."""
    pc = to_camera(points, pose)
    z = pc[..., 2]
    return cam.fx * pc[..., 0] / z + cam.cx, cam.fy * pc[..., 1] / z + cam.cy, z


def project(point, cam: CameraIntrinsics, pose: CameraPose):
    pc = to_camera(np.asarray(point, dtype=np.float64).reshape(3), pose)
    z = float(pc[2])
    if not z > 0.0:
        raise BehindCamera(f"point has camera depth {z!r} <= 0")
    return float(cam.fx * pc[0] / z + cam.cx), float(cam.fy * pc[1] / z + cam.cy), z


def unproject_points(u, v, depth, cam: CameraIntrinsics, pose: CameraPose):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    pc = np.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], axis=-1)
    return pose.world_from_camera.apply(pc)


def unproject(u, v, depth, cam: CameraIntrinsics, pose: CameraPose):
    if not depth > 0.0:
        raise InvalidDepth(f"depth {depth!r} must be positive")
    return unproject_points(u, v, depth, cam, pose)


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class RgbdImage:
    """RGB in ``[0, 1]`` as float64 ``(H, W, 3)`` and metric depth ``(H, W)``.

    Colors stay real-valued in memory; ``rgb8`` gives the byte image written to disk.
    """

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        depth = _frozen(self.depth)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[:2] != depth.shape:
            raise DimensionMismatch(f"rgb {rgb.shape} and depth {depth.shape} disagree")
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise InvalidDepth("depth must be finite and non-negative")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @classmethod
    def from_rgb8(cls, rgb8, depth):
        return cls(np.asarray(rgb8, dtype=np.float64) / 255.0, depth)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self):
        return self.depth > 0

    @property
    def rgb8(self):
        return np.clip(np.round(self.rgb * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Camera:
    """A named camera: intrinsics plus placement."""

    name: str
    intrinsics: CameraIntrinsics
    pose: CameraPose

    def transformed(self, t: RigidTransform) -> Camera:
        return Camera(self.name, self.intrinsics, self.pose.transformed(t))
