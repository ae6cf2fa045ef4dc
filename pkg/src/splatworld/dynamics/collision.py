"""Convex-convex collision: GJK distance, EPA penetration and contact manifolds.

Everything here is written to be equivariant under rigid motions of the whole
scene: search directions start from the center difference, and manifold points
are ordered by their coordinates in the first body's local frame, so a rotated
copy of a scene generates the same contacts in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import RigidTransform
from ..mesh import ConvexHull

EPA_TOL = 1e-10
GJK_REL_TOL = 1e-12
MAX_MANIFOLD = 8


@dataclass(frozen=True)
class Contact:
    """``normal`` points from body B to body A; ``depth`` > 0 means penetration."""

    point: np.ndarray
    normal: np.ndarray
    depth: float


def _support(verts, d):
    i = int(np.argmax(verts @ d))
    return verts[i]


class _Minkowski:
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a, self.b = a, b

    def support(self, d):
        pa = _support(self.a, d)
        pb = _support(self.b, -d)
        return pa - pb, pa, pb


def _closest_segment(p):
    a, b = p
    ab = b - a
    denom = ab @ ab
    t = -(a @ ab) / denom if denom > 0 else 0.0
    if t <= 0.0:
        return a, [0], [1.0]
    if t >= 1.0:
        return b, [1], [1.0]
    return a + t * ab, [0, 1], [1.0 - t, t]


def _closest_triangle(p):
    # Voronoi-region walk for the origin against triangle abc
    a, b, c = p
    ab, ac = b - a, c - a
    ap = -a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a, [0], [1.0]
    bp = -b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b, [1], [1.0]
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return a + t * ab, [0, 1], [1 - t, t]
    cp = -c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c, [2], [1.0]
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return a + t * ac, [0, 2], [1 - t, t]
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), [1, 2], [1 - t, t]
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return a + v * ab + w * ac, [0, 1, 2], [1 - v - w, v, w]


def _closest_tetra(p):
    a, b, c, d = p
    best = None
    inside = True
    for face, opp in (((0, 1, 2), 3), ((0, 1, 3), 2), ((0, 2, 3), 1), ((1, 2, 3), 0)):
        fa, fb, fc = (p[i] for i in face)
        n = np.cross(fb - fa, fc - fa)
        s_origin = -(fa @ n)
        s_opp = (p[opp] - fa) @ n
        if s_origin * s_opp < 0:
            inside = False
            pt, idx, wts = _closest_triangle([fa, fb, fc])
            dist = pt @ pt
            if best is None or dist < best[0]:
                best = (dist, pt, [face[i] for i in idx], wts)
    if inside:
        # origin enclosed: barycentric weights of the origin
        m = np.column_stack([b - a, c - a, d - a])
        try:
            x = np.linalg.solve(m, -a)
        except np.linalg.LinAlgError:
            x = np.array([1 / 3, 1 / 3, 1 / 3])
        return np.zeros(3), [0, 1, 2, 3], [1 - x.sum(), x[0], x[1], x[2]]
    return best[1], best[2], best[3]


def _closest_on_simplex(pts):
    if len(pts) == 1:
        return pts[0], [0], [1.0]
    if len(pts) == 2:
        return _closest_segment(pts)
    if len(pts) == 3:
        return _closest_triangle(pts)
    return _closest_tetra(pts)


@dataclass
class _GjkResult:
    overlap: bool
    distance: float
    normal: np.ndarray | None
    point_a: np.ndarray | None
    point_b: np.ndarray | None
    simplex: list


def gjk(va, vb, guess) -> _GjkResult:
    """Closest points between two vertex sets, or an enclosing simplex on overlap."""
    mk = _Minkowski(va, vb)
    d = np.asarray(guess, dtype=np.float64)
    if not np.any(d):
        d = np.array([1.0, 0.0, 0.0])
    w, pa, pb = mk.support(d)
    simplex = [(w, pa, pb)]
    v = w
    weights = [1.0]
    scale = max(float(np.abs(va).max()), float(np.abs(vb).max()), 1e-12)
    abs_tol = 1e-15 * scale * scale
    for _ in range(64):
        vv = v @ v
        if vv <= 1e-24:
            return _GjkResult(True, 0.0, None, None, None, simplex)
        w, pa, pb = mk.support(-v)
        if vv - v @ w <= GJK_REL_TOL * vv + abs_tol:
            break
        if any(np.array_equal(w, s[0]) for s in simplex):
            break
        cand = simplex + [(w, pa, pb)]
        v_new, idx, w_new = _closest_on_simplex([s[0] for s in cand])
        if len(idx) < 4 and v_new @ v_new >= vv:
            break  # no progress: rounding noise, keep the current estimate
        v, weights = v_new, w_new
        simplex = [cand[i] for i in idx]
        if len(simplex) == 4:
            return _GjkResult(True, 0.0, None, None, None, simplex)
    dist = float(np.sqrt(v @ v))
    if dist <= 1e-12:
        return _GjkResult(True, 0.0, None, None, None, simplex)
    point_a = sum(wt * s[1] for wt, s in zip(weights, simplex))
    point_b = sum(wt * s[2] for wt, s in zip(weights, simplex))
    return _GjkResult(False, dist, v / dist, point_a, point_b, simplex)


_AXES = [np.array(a, dtype=np.float64) for a in
         ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1])]


def _complete_tetra(mk, simplex):
    pts = list(simplex)

    def volume(ps):
        return abs(np.linalg.det(np.column_stack([ps[1][0] - ps[0][0], ps[2][0] - ps[0][0], ps[3][0] - ps[0][0]])))

    while len(pts) < 4:
        cands = []
        if len(pts) == 1:
            dirs = _AXES
        elif len(pts) == 2:
            e = pts[1][0] - pts[0][0]
            k = int(np.argmin(np.abs(e)))
            perp = np.cross(e, _AXES[2 * k])
            dirs = [perp, -perp, np.cross(e, perp), -np.cross(e, perp)]
        else:
            n = np.cross(pts[1][0] - pts[0][0], pts[2][0] - pts[0][0])
            dirs = [n, -n]
        for d in dirs:
            if not np.any(d):
                continue
            w, pa, pb = mk.support(d)
            if any(np.allclose(w, p[0], atol=1e-14) for p in pts):
                continue
            cands.append((w, pa, pb))
        if not cands:
            return None
        if len(pts) == 3:
            best = max(cands, key=lambda c: volume(pts + [c]))
            if volume(pts + [best]) < 1e-18:
                return None
            pts.append(best)
        else:
            pts.append(cands[0] if len(pts) == 1 else max(
                cands, key=lambda c: np.linalg.norm(np.cross(pts[1][0] - pts[0][0], c[0] - pts[0][0]))))
    return pts


def _tie_key(n):
    return (-abs(n[0]), -abs(n[1]), -abs(n[2]), -n[0], -n[1], -n[2])


def epa(va, vb, simplex):
    """Penetration normal (pointing from B into A's escape direction) and depth."""
    mk = _Minkowski(va, vb)
    pts = _complete_tetra(mk, simplex)
    if pts is None:
        return None
    verts = [p[0] for p in pts]
    pa_list = [p[1] for p in pts]
    pb_list = [p[2] for p in pts]
    interior = sum(verts) / 4.0
    faces = []

    def make_face(i, j, k):
        n = np.cross(verts[j] - verts[i], verts[k] - verts[i])
        norm = np.linalg.norm(n)
        if norm < 1e-30:
            return None
        n = n / norm
        if n @ (verts[i] - interior) < 0:
            n = -n
            i, j = j, i
        return [i, j, k, n, float(n @ verts[i])]

    for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        face = make_face(*f)
        if face is not None:
            faces.append(face)
    if not faces:
        return None

    for _ in range(128):
        dmin = min(f[4] for f in faces)
        near = [f for f in faces if f[4] <= dmin + 1e-12]
        terminal = []
        grown = None
        for f in near:
            w, pa, pb = mk.support(f[3])
            if w @ f[3] - f[4] <= EPA_TOL:
                terminal.append(f)
            elif grown is None:
                grown = (f, w, pa, pb)
        if terminal and (grown is None or len(terminal) == len(near) or terminal):
            best = min(terminal, key=lambda f: _tie_key(f[3]))
            return _epa_result(best, verts, pa_list, pb_list)
        f, w, pa, pb = grown
        new = len(verts)
        verts.append(w)
        pa_list.append(pa)
        pb_list.append(pb)
        visible = [g for g in faces if g[3] @ (w - verts[g[0]]) > 1e-14]
        edges = {}
        for g in visible:
            for e in ((g[0], g[1]), (g[1], g[2]), (g[2], g[0])):
                if (e[1], e[0]) in edges:
                    del edges[(e[1], e[0])]
                else:
                    edges[e] = True
        faces = [g for g in faces if g not in visible]
        for (i, j) in edges:
            face = make_face(i, j, new)
            if face is not None:
                faces.append(face)
        if not faces:
            return None
    best = min(faces, key=lambda f: (f[4], _tie_key(f[3])))
    return _epa_result(best, verts, pa_list, pb_list)


def _epa_result(face, verts, pa_list, pb_list):
    i, j, k, n, dist = face
    proj = n * dist
    a, b, c = verts[i], verts[j], verts[k]
    v0, v1, v2 = b - a, c - a, proj - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    if abs(den) < 1e-30:
        u, v = 0.0, 0.0
    else:
        u = (d11 * d20 - d01 * d21) / den
        v = (d00 * d21 - d01 * d20) / den
    wts = (1 - u - v, u, v)
    pa = wts[0] * pa_list[i] + wts[1] * pa_list[j] + wts[2] * pa_list[k]
    pb = wts[0] * pb_list[i] + wts[1] * pb_list[j] + wts[2] * pb_list[k]
    # EPA's n is the escape direction of B relative to A; A leaves along -n
    return -n, float(dist), pa, pb


def separation(va, vb, guess):
    """Signed separation ``(sep, normal_BA, point_a, point_b)``; ``sep < 0`` on overlap."""
    res = gjk(va, vb, guess)
    if not res.overlap:
        return res.distance, res.normal, res.point_a, res.point_b
    out = epa(va, vb, res.simplex)
    if out is None:
        return 0.0, None, None, None
    n, depth, pa, pb = out
    return -depth, n, pa, pb


# ---------------------------------------------------------------------------
# manifolds

FACE_ALIGN = 0.99  # below this the contact is treated as edge-edge (single point)
REF_PREFERENCE = 1e-3  # B's face stays the reference unless A's aligns clearly better


def _plane_basis(n):
    k = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[k] = 1.0
    u = np.cross(n, e)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def face_polygons(hull: ConvexHull):
    """Merge the hull's coplanar triangles into polygons.

    Returns ``(normals, offsets, loops)``; each loop lists vertex indices
    counter-clockwise about its outward normal. Cached on the hull.
    """
    cached = getattr(hull, "_polygons", None)
    if cached is not None:
        return cached
    v = hull.vertices
    scale = max(float(np.abs(v).max()), 1e-12)
    tol = 1e-9 * scale
    seen = {}
    normals, offsets, loops = [], [], []
    for eq in hull.equations:
        n, d = eq[:3], -eq[3]
        on = np.nonzero(np.abs(v @ n - d) <= tol)[0]
        key = tuple(on)
        if key in seen or len(on) < 3:
            continue
        seen[key] = True
        pts = v[on]
        c = pts.mean(axis=0)
        u, w = _plane_basis(n)
        ang = np.arctan2((pts - c) @ w, (pts - c) @ u)
        loops.append(on[np.argsort(ang, kind="stable")])
        normals.append(n)
        offsets.append(d)
    out = (np.array(normals), np.array(offsets), loops)
    object.__setattr__(hull, "_polygons", out)
    return out


def _clip_against(poly, ref, n_ref):
    """Sutherland-Hodgman clip of a 3-D polygon by the side planes of ``ref``."""
    out = list(poly)
    m = len(ref)
    for i in range(m):
        e0, e1 = ref[i], ref[(i + 1) % m]
        side = np.cross(n_ref, e1 - e0)
        inp, out = out, []
        if not inp:
            break
        dist = [(p - e0) @ side for p in inp]
        for k in range(len(inp)):
            cur, dc = inp[k], dist[k]
            prev, dp = inp[k - 1], dist[k - 1]
            if dc >= 0:
                if dp < 0:
                    out.append(prev + (cur - prev) * (dp / (dp - dc)))
                out.append(cur)
            elif dp >= 0:
                out.append(prev + (cur - prev) * (dp / (dp - dc)))
    return out


def _reduce(points, seps, n_max=MAX_MANIFOLD):
    if len(points) <= n_max:
        return list(range(len(points)))
    pts = np.array(points)
    chosen = [int(np.argmin(seps))]
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < n_max:
        k = int(np.argmax(dist))
        if dist[k] <= 0:
            break
        chosen.append(k)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[k], axis=1))
    return sorted(chosen)


def manifold(hull_a: ConvexHull, pose_a: RigidTransform, hull_b: ConvexHull, pose_b: RigidTransform,
             normal, sep, fallback_point, margin=0.0):
    """Contact points for a pair whose closest-feature normal (B to A) is ``normal``.

    Face contacts clip the incident face against the reference face and report a
    separation per point; edge contacts give a single point at the witness.
    """
    na_l, _, loops_a = face_polygons(hull_a)
    nb_l, _, loops_b = face_polygons(hull_b)
    ra, rb = pose_a.rotation_matrix, pose_b.rotation_matrix
    na, nb = na_l @ ra.T, nb_l @ rb.T
    align_a = na @ -normal
    align_b = nb @ normal
    fa, fb = int(np.argmax(align_a)), int(np.argmax(align_b))
    if max(align_a[fa], align_b[fb]) < FACE_ALIGN:
        return [Contact(np.asarray(fallback_point), normal, -sep)]
    if align_b[fb] >= align_a[fa] - REF_PREFERENCE:
        ref_pts = pose_b.apply(hull_b.vertices[loops_b[fb]])
        n_ref = nb[fb]
        inc_normals, inc_loops, inc_hull, inc_pose = na, loops_a, hull_a, pose_a
        contact_normal = n_ref
    else:
        ref_pts = pose_a.apply(hull_a.vertices[loops_a[fa]])
        n_ref = na[fa]
        inc_normals, inc_loops, inc_hull, inc_pose = nb, loops_b, hull_b, pose_b
        contact_normal = -n_ref
    inc = int(np.argmin(inc_normals @ n_ref))
    inc_pts = inc_pose.apply(inc_hull.vertices[inc_loops[inc]])
    clipped = _clip_against(list(inc_pts), ref_pts, n_ref)
    points, seps = [], []
    for p in clipped:
        s = float((p - ref_pts[0]) @ n_ref)
        if s <= margin:
            points.append(p - 0.5 * s * n_ref)
            seps.append(s)
    if not points:
        return [Contact(np.asarray(fallback_point), normal, -sep)]
    keep = _reduce(points, seps)
    points = [points[i] for i in keep]
    seps = [seps[i] for i in keep]
    # canonical order: coordinates in A's local frame
    local = pose_a.inverse().apply(np.array(points))
    order = sorted(range(len(points)), key=lambda i: tuple(np.round(local[i], 9)))
    return [Contact(points[i], contact_normal, -seps[i]) for i in order]


def hull_contact(a: ConvexHull, pose_a: RigidTransform, b: ConvexHull, pose_b: RigidTransform,
                 margin: float = 0.0):
    """Contacts between two posed hulls (hulls in their local frames), or ``None`` if apart.

    Returns contacts when the hulls overlap or are closer than ``margin``.
    """
    return contacts_between(a, pose_a, pose_a.apply(a.vertices), b, pose_b, pose_b.apply(b.vertices), margin)


def contacts_between(hull_a, pose_a, va, hull_b, pose_b, vb, margin=0.0):
    guess = pose_a.translation - pose_b.translation
    sep, normal, pa, pb = separation(va, vb, guess)
    if normal is None or sep > margin:
        return None
    return manifold(hull_a, pose_a, hull_b, pose_b, normal, sep, 0.5 * (pa + pb), margin)
