"""Geometry pipeline: planes, TSDF fusion, surface extraction, hulls and clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull as _QHull
from scipy.spatial import QhullError
from skimage import measure

from .core import RigidTransform, to_camera
from .errors import DegenerateInput, EmptyDepth, EmptySurface


@dataclass(frozen=True)
class Plane:
    """The set ``normal . x = offset``; ``normal`` is unit length."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        n = n / norm
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @classmethod
    def horizontal(cls, height=0.0):
        return cls(np.array([0.0, 0.0, 1.0]), height)

    def signed_distance(self, points):
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def project(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points - self.signed_distance(points)[..., None] * self.normal

    def transformed(self, t: RigidTransform) -> Plane:
        n = t.apply_vector(self.normal)
        return Plane(n, self.offset + float(n @ t.translation))


def _orient_up(normal):
    # canonical orientation: +z side up; horizontal normals point to the first positive axis
    for axis in (2, 0, 1):
        if abs(normal[axis]) > 1e-12:
            return normal if normal[axis] > 0 else -normal
    return normal


def fit_plane_lstsq(points) -> Plane:
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = _orient_up(vt[-1])
    return Plane(n, float(n @ centroid))


def ransac_plane(points, iterations: int = 500, inlier_threshold: float = 0.005, seed: int = 0):
    """Plane with the most inliers over random point triples, refit by least squares.

    Returns ``(plane, inlier_indices)``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(pts)}")
    spread = pts - pts.mean(axis=0)
    sv = np.linalg.svd(spread, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateInput("points are collinear")
    rng = np.random.default_rng(seed)
    best_count, best = -1, None
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        count = int(np.count_nonzero(np.abs(pts @ n - n @ a) <= inlier_threshold))
        if count > best_count:
            best_count, best = count, (n, float(n @ a))
    if best is None:
        raise DegenerateInput("no non-degenerate sample found")
    n, d = best
    inliers = np.nonzero(np.abs(pts @ n - d) <= inlier_threshold)[0]
    plane = fit_plane_lstsq(pts[inliers])
    inliers = np.nonzero(np.abs(plane.signed_distance(pts)) <= inlier_threshold)[0]
    return plane, inliers


# ---------------------------------------------------------------------------
# meshes and hulls


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    def transformed(self, t: RigidTransform) -> TriangleMesh:
        return TriangleMesh(t.apply(self.vertices), self.triangles, self.colors)

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def cleaned(self, min_area=1e-14) -> TriangleMesh:
        """Drop zero-area triangles and vertices no triangle references."""
        tris = self.triangles[self.triangle_areas() > min_area] if len(self.triangles) else self.triangles
        used = np.unique(tris)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        colors = self.colors[used] if self.colors is not None else None
        return TriangleMesh(self.vertices[used], remap[tris], colors)


def box_mesh(half_extents, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    hx, hy, hz = half_extents
    v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    hull = convex_hull(v)
    return TriangleMesh(hull.vertices + np.asarray(center), hull.faces)


def icosphere(radius, subdivisions=2, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}
        nf = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriangleMesh(np.array(verts) * radius + np.asarray(center), np.array(f))


@dataclass(frozen=True)
class ConvexHull:
    """Hull vertices, outward-oriented triangle faces and their half-space equations.

    A point ``x`` is inside iff ``equations[:, :3] @ x + equations[:, 3] <= 0`` for all faces.
    """

    vertices: np.ndarray
    faces: np.ndarray
    equations: np.ndarray

    @property
    def centroid_of_vertices(self):
        return self.vertices.mean(axis=0)

    def signed_distance(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points @ self.equations[:, :3].T + self.equations[:, 3]).max(axis=-1)

    def contains(self, points, tol=1e-9):
        return self.signed_distance(points) <= tol

    def support(self, direction):
        return self.vertices[int(np.argmax(self.vertices @ direction))]

    def transformed(self, t: RigidTransform) -> ConvexHull:
        n = t.apply_vector(self.equations[:, :3])
        d = self.equations[:, 3] - n @ t.translation
        return ConvexHull(t.apply(self.vertices), self.faces, np.column_stack([n, d]))

    def mesh(self) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces)

    def bounding_radius(self, center):
        return float(np.linalg.norm(self.vertices - center, axis=1).max())


def convex_hull(points) -> ConvexHull:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateInput(f"need at least 4 points, got {len(pts)}")
    try:
        qh = _QHull(pts)
    except QhullError as exc:
        raise DegenerateInput(f"points are not affinely independent: {exc.args[0].splitlines()[0]}") from exc
    keep = np.sort(qh.vertices)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    verts = pts[keep]
    faces = remap[qh.simplices]
    eq = qh.equations.copy()
    # make every face wind counter-clockwise seen from outside
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, eq[:, :3]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return ConvexHull(verts, faces, eq)


def clip_below_plane(mesh: TriangleMesh, plane: Plane, epsilon: float = 0.0) -> TriangleMesh:
    """Flatten the part of ``mesh`` below ``plane`` onto the plane offset by ``-epsilon``.

    Triangles entirely below are dropped, other below-plane vertices are projected.
    """
    if len(mesh.vertices) == 0:
        return mesh
    floor = plane.offset - epsilon
    dist = mesh.vertices @ plane.normal - floor
    below = dist < -1e-12
    if not below.any():
        return mesh
    tris = mesh.triangles[~below[mesh.triangles].all(axis=1)]
    verts = mesh.vertices.copy()
    verts[below] -= dist[below, None] * plane.normal
    return TriangleMesh(verts, tris, mesh.colors).cleaned()


# ---------------------------------------------------------------------------
# TSDF


@dataclass
class TsdfGrid:
    """Voxel ``(i, j, k)`` has its center at ``origin + voxel_size * (i, j, k)``."""

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray
    weights: np.ndarray
    truncation: float

    @property
    def dims(self):
        return self.values.shape

    def voxel_centers(self):
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + self.voxel_size * idx


def _fusion_bounds(frames, voxel_size, truncation):
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for image, mask, cam, pose in frames:
        sel = np.asarray(mask, dtype=bool) & image.valid
        if not sel.any():
            continue
        vs, us = np.nonzero(sel)
        d = image.depth[vs, us]
        pc = np.stack([(us - cam.cx) / cam.fx * d, (vs - cam.cy) / cam.fy * d, d], axis=1)
        pw = pose.world_from_camera.apply(pc)
        lo = np.minimum(lo, pw.min(axis=0))
        hi = np.maximum(hi, pw.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise EmptyDepth("no valid masked depth in any frame")
    pad = truncation + 2 * voxel_size
    return lo - pad, hi + pad


def tsdf_fuse(frames, voxel_size: float = 0.005, truncation: float = 0.02, bounds=None) -> TsdfGrid:
    """Weighted-average projective TSDF over masked valid-depth pixels.

    ``frames``: sequence of ``(RgbdImage, mask, CameraIntrinsics, CameraPose)``.
    Values are metric signed distances clipped to ``[-truncation, truncation]``,
    positive in front of the observed surface. Voxels no pixel constrains keep
    weight 0 and value ``+truncation``.
    """
    if truncation < voxel_size:
        raise ValueError("truncation must be at least one voxel")
    frames = list(frames)
    if bounds is None:
        bounds = _fusion_bounds(frames, voxel_size, truncation)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    dims = tuple(int(x) for x in np.floor((hi - lo) / voxel_size).astype(int) + 1)
    grid = TsdfGrid(lo, voxel_size, np.full(dims, truncation), np.zeros(dims), truncation)
    centers = grid.voxel_centers().reshape(-1, 3)
    acc = np.zeros(len(centers))
    wsum = np.zeros(len(centers))
    any_depth = False
    for image, mask, cam, pose in frames:
        mask = np.asarray(mask, dtype=bool)
        valid = mask & image.valid
        if not valid.any():
            continue
        any_depth = True
        pc = to_camera(centers, pose)
        z = pc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = np.rint(cam.fx * pc[:, 0] / zs + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * pc[:, 1] / zs + cam.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        uu, vv = np.where(inside, u, 0), np.where(inside, v, 0)
        ok = inside & valid[vv, uu]
        sdf = image.depth[vv, uu] - z
        ok &= sdf >= -truncation
        acc[ok] += np.minimum(sdf[ok], truncation)
        wsum[ok] += 1.0
    if not any_depth:
        raise EmptyDepth("no valid masked depth in any frame")
    seen = wsum > 0
    values = np.full(len(centers), truncation)
    values[seen] = acc[seen] / wsum[seen]
    grid.values = values.reshape(dims)
    grid.weights = wsum.reshape(dims)
    return grid


def sdf_grid(fn, lo, hi, voxel_size, truncation=None) -> TsdfGrid:
    """Sample an analytic signed distance function on a grid (all weights 1)."""
    lo = np.asarray(lo, dtype=np.float64)
    dims = tuple(int(x) for x in np.floor((np.asarray(hi) - lo) / voxel_size).astype(int) + 1)
    grid = TsdfGrid(lo, voxel_size, np.zeros(dims), np.ones(dims), truncation or np.inf)
    vals = fn(grid.voxel_centers())
    if truncation is not None:
        vals = np.clip(vals, -truncation, truncation)
    grid.values = vals
    return grid


def marching_cubes(grid: TsdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface of the grid; cells touching unobserved voxels produce no faces."""
    vals = grid.values
    if vals.size == 0 or min(vals.shape) < 2 or not (vals.min() < iso < vals.max()):
        raise EmptySurface("grid has no iso-crossing")
    try:
        verts, faces, _, _ = measure.marching_cubes(vals, level=iso, allow_degenerate=False)
    except (ValueError, RuntimeError) as exc:
        raise EmptySurface(str(exc)) from exc
    seen = grid.weights > 0
    if not seen.all():
        lo = np.floor(verts).astype(np.int64)
        hi = np.ceil(verts).astype(np.int64)
        vok = seen[tuple(lo.T)] & seen[tuple(hi.T)]
        faces = faces[vok[faces].all(axis=1)]
    if len(faces) == 0:
        raise EmptySurface("no surface inside observed voxels")
    mesh = TriangleMesh(grid.origin + grid.voxel_size * verts, faces)
    return mesh.cleaned()
