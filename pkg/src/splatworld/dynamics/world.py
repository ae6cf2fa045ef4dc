"""Rigid bodies, the world state and the semi-implicit Euler stepper."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..core import RigidTransform, quat_conjugate, quat_exp, quat_multiply, quat_normalize, quat_to_matrix
from ..errors import NonFiniteState
from ..mesh import ConvexHull, Plane, TriangleMesh, convex_hull
from ..splat import GaussianSet, world_splats
from .collision import contacts_between
from .solver import solve

GRAVITY = (0.0, 0.0, -9.81)
DEFAULT_DT = 1.0 / 240.0
RESTITUTION_THRESHOLD = 0.05  # m/s; slower impacts are treated as perfectly inelastic
MANIFOLD_MAX = 8
TABLE_ID = "__table__"
WARM_START_RADIUS = 2e-3  # m; contacts closer than this in body A's frame are matched


@dataclass(frozen=True)
class PhysicalParams:
    mass: float = 0.2
    friction: float = 0.5
    restitution: float = 0.0
    fixed: bool = False

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive (or inf for fixed bodies)")
        if not self.friction >= 0:
            raise ValueError("friction must be non-negative")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if math.isinf(self.mass):
            object.__setattr__(self, "fixed", True)

    @property
    def is_fixed(self):
        return self.fixed


@dataclass
class RigidBodyState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64).reshape(3)
        self.orientation = quat_normalize(np.array(self.orientation, dtype=np.float64).reshape(4))
        self.velocity = np.array(self.velocity, dtype=np.float64).reshape(3)
        self.angular_velocity = np.array(self.angular_velocity, dtype=np.float64).reshape(3)

    @classmethod
    def at(cls, pose: RigidTransform):
        return cls(pose.translation, pose.rotation)

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.orientation, self.position)

    def copy(self):
        return RigidBodyState(self.position, self.orientation, self.velocity, self.angular_velocity)


@dataclass(frozen=True)
class PoseDelta:
    """``translation`` is added to the center; ``rotation`` is left-multiplied onto the orientation."""

    translation: np.ndarray
    rotation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


def mass_properties(hull: ConvexHull, mass: float):
    """Center of mass and body-frame inertia tensor of a uniform-density hull."""
    v = hull.vertices
    ref = v.mean(axis=0)
    tri = v[hull.faces] - ref
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = det.sum() / 6.0
    if not vol > 0:
        raise ValueError("hull has no volume")
    com_rel = (det[:, None] * (a + b + c)).sum(axis=0) / (24.0 * vol)
    # second moment about ref: sum det/120 * (sum_i x_i x_i^T + (sum_i x_i)(sum_i x_i)^T)
    s = a + b + c
    cov = (np.einsum("k,ki,kj->ij", det, a, a) + np.einsum("k,ki,kj->ij", det, b, b)
           + np.einsum("k,ki,kj->ij", det, c, c) + np.einsum("k,ki,kj->ij", det, s, s)) / 120.0
    cov -= vol * np.outer(com_rel, com_rel)
    inertia = (np.trace(cov) * np.eye(3) - cov) * (mass / vol)
    return ref + com_rel, inertia


@dataclass
class ObjectAsset:
    """An object: splats and mesh in its local frame, collision hull, parameters and state.

    ``kinematic`` bodies (e.g. an object held by the gripper) are moved by their
    owner, not by dynamics; they still push dynamic bodies.
    """

    id: str
    splats: GaussianSet
    mesh: TriangleMesh
    hull: ConvexHull
    params: PhysicalParams
    state: RigidBodyState
    kinematic: bool = False
    inertia: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.inertia is None:
            if self.params.fixed:
                self.inertia = np.full((3, 3), np.inf)
            else:
                _, self.inertia = mass_properties(self.hull, self.params.mass)
        self._radius = float(np.linalg.norm(self.hull.vertices, axis=1).max())

    @classmethod
    def create(cls, id: str, mesh: TriangleMesh, splats: GaussianSet | None = None,
               params: PhysicalParams | None = None, pose: RigidTransform | None = None,
               recenter: bool = True) -> ObjectAsset:
        """Build an asset; with ``recenter`` the local frame is moved to the center of mass.

        Recentering keeps the world placement of mesh and splats unchanged.
        """
        params = params or PhysicalParams()
        pose = pose or RigidTransform.identity()
        splats = splats if splats is not None else GaussianSet.empty()
        hull = convex_hull(mesh.vertices)
        com = mass_properties(hull, 1.0)[0] if recenter and not params.fixed else np.zeros(3)
        if np.linalg.norm(com) > 1e-12 * max(float(np.abs(hull.vertices).max()), 1.0):
            shift = RigidTransform.from_translation(-com)
            mesh = mesh.transformed(shift)
            hull = convex_hull(mesh.vertices)
            if len(splats):
                splats = world_splats(shift, splats)
            pose = RigidTransform(pose.rotation, pose.apply(com))
        return cls(id, splats, mesh, hull, params, RigidBodyState.at(pose))

    @property
    def pose(self) -> RigidTransform:
        return self.state.pose

    @property
    def radius(self):
        return self._radius

    @property
    def is_dynamic(self):
        return not (self.params.fixed or self.kinematic)

    def world_hull(self) -> ConvexHull:
        return self.hull.transformed(self.pose)

    def world_splats(self) -> GaussianSet:
        return world_splats(self.pose, self.splats)

    def copy(self) -> ObjectAsset:
        dup = copy.copy(self)
        dup.state = self.state.copy()
        return dup


@dataclass
class KinematicBody:
    """A body moved by script (the gripper). It pushes objects but never reacts."""

    id: str
    hull: ConvexHull
    pose: RigidTransform
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    friction: float = 0.5
    enabled: bool = True
    ignore: frozenset = frozenset()

    def copy(self):
        return copy.copy(self)


@dataclass(frozen=True)
class SolverConfig:
    """Contact solver constants.

    ``iterations`` sweeps always run; extra sweeps (up to ``max_iterations``)
    run while a sweep still corrects some contact velocity by more than
    ``tolerance`` m/s. Stacks need them: an unconverged solve leaves small
    upward velocities that pump energy into resting bodies.
    """

    iterations: int = 8
    baumgarte: float = 0.2
    slop: float = 5e-4
    margin: float = 2e-3
    max_iterations: int = 64
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_iterations < self.iterations:
            raise ValueError("max_iterations must be >= iterations")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be non-negative")


@dataclass
class WorldState:
    objects: list
    table: Plane = field(default_factory=Plane.horizontal)
    workspace: ConvexHull | None = None
    background_splats: GaussianSet = field(default_factory=GaussianSet.empty)
    gravity: np.ndarray = field(default_factory=lambda: np.array(GRAVITY))
    dt: float = DEFAULT_DT
    solver: SolverConfig = field(default_factory=SolverConfig)
    kinematic: dict = field(default_factory=dict)
    time: float = 0.0
    # accumulated impulses of the previous step, keyed by body-id pair, for warm starting
    contact_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids in {ids}")

    def object(self, oid: str) -> ObjectAsset:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def ids(self):
        return [o.id for o in self.objects]

    def poses(self) -> dict:
        return {o.id: o.pose for o in self.objects}

    def copy(self) -> WorldState:
        dup = copy.copy(self)
        dup.objects = [o.copy() for o in self.objects]
        dup.kinematic = {k: b.copy() for k, b in self.kinematic.items()}
        dup.contact_cache = dict(self.contact_cache)
        return dup

    def is_at_rest(self, v_eps=1e-3, w_eps=1e-2) -> bool:
        return all(np.linalg.norm(o.state.velocity) < v_eps and np.linalg.norm(o.state.angular_velocity) < w_eps
                   for o in self.objects if o.is_dynamic)

    def step(self) -> dict:
        """Advance this world by ``dt`` in place; returns ``{id: PoseDelta}``."""
        return _step_in_place(self)


def step(world: WorldState):
    """Functional step: returns ``(new_world, {id: PoseDelta})`` and leaves ``world`` untouched."""
    nxt = world.copy()
    deltas = _step_in_place(nxt)
    return nxt, deltas


def sync_splats(asset: ObjectAsset, delta: PoseDelta | None = None) -> GaussianSet:
    """World-frame splats of ``asset`` at its current pose.

    Moving every splat center by ``delta.translation`` about the body center and
    left-multiplying ``delta.rotation`` onto the orientations is the same as
    re-posing the local splats with the new body pose, which is what is done.
    """
    return asset.world_splats()


@dataclass
class SettleResult:
    world: WorldState
    steps: int
    converged: bool


def settle(world: WorldState, max_steps: int = 2000, v_eps: float = 1e-3, w_eps: float = 1e-2) -> SettleResult:
    """Step until a state and its successor both have every speed below the thresholds.

    The returned world is the last state that passed the test, so a scene already
    at rest comes back unchanged after 0 steps.
    """
    current = world.copy()
    steps = 0
    while True:
        resting = current.is_at_rest(v_eps, w_eps)
        if steps >= max_steps:
            return SettleResult(current, steps, resting)
        nxt = current.copy()
        _step_in_place(nxt)
        if resting and nxt.is_at_rest(v_eps, w_eps):
            return SettleResult(current, steps, True)
        current = nxt
        steps += 1


# ---------------------------------------------------------------------------
# the stepper


def _margin(cfg: SolverConfig, speed, spin, radius, dt):
    return cfg.margin + 1.5 * dt * (speed + spin * radius)


def _plane_support_mask(points, table: Plane, workspace: ConvexHull | None):
    if workspace is None:
        return np.ones(len(points), dtype=bool)
    # keep the points whose projection lies within the workspace's side faces
    proj = table.project(points)
    n = workspace.equations[:, :3]
    side = np.abs(n @ table.normal) < 0.5
    if not side.any():
        return np.ones(len(points), dtype=bool)
    d = proj @ n[side].T + workspace.equations[side, 3]
    return (d <= 1e-9).all(axis=1)


def _reduce_plane_points(idx, pts, table: Plane):
    if len(idx) <= MANIFOLD_MAX:
        return idx
    # keep extreme points in the plane: the deepest, then farthest-point sampling
    n = table.normal
    depth = -(pts @ n)
    chosen = [int(np.argmax(depth))]
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < MANIFOLD_MAX:
        k = int(np.argmax(dist))
        if dist[k] <= 0:
            break
        chosen.append(k)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[k], axis=1))
    return idx[np.sort(chosen)]


def _step_in_place(world: WorldState) -> dict:
    dt = world.dt
    cfg = world.solver
    objs = world.objects
    kin = [b for b in world.kinematic.values() if b.enabled]
    nb = len(objs) + len(kin) + 1  # last slot: the static world
    static = nb - 1
    X = np.zeros((nb, 3))
    V = np.zeros((nb, 3))
    W = np.zeros((nb, 3))
    IM = np.zeros(nb)
    II = np.zeros((nb, 3, 3))
    R = np.zeros((nb, 3, 3))
    R[static] = np.eye(3)
    old_pos = [o.state.position.copy() for o in objs]
    old_rot = [o.state.orientation.copy() for o in objs]

    for i, o in enumerate(objs):
        X[i] = o.state.position
        R[i] = quat_to_matrix(o.state.orientation)
        if o.params.fixed:
            continue
        V[i] = o.state.velocity
        W[i] = o.state.angular_velocity
        if not o.kinematic:
            V[i] += world.gravity * dt
            IM[i] = 1.0 / o.params.mass
            II[i] = R[i] @ np.linalg.inv(o.inertia) @ R[i].T
    for k, b in enumerate(kin):
        j = len(objs) + k
        X[j] = b.pose.translation
        R[j] = b.pose.rotation_matrix
        V[j] = b.velocity
        W[j] = b.angular_velocity

    rows_a, rows_b, points, normals, seps, mus, rests = [], [], [], [], [], [], []
    names = [o.id for o in objs] + [b.id for b in kin] + [TABLE_ID]

    def add(a, b, p, n, sep, mu, e):
        rows_a.append(a)
        rows_b.append(b)
        points.append(p)
        normals.append(n)
        seps.append(sep)
        mus.append(mu)
        rests.append(e)

    world_verts = {}
    margins = {}
    for i, o in enumerate(objs):
        world_verts[i] = o.hull.vertices @ R[i].T + X[i]
        margins[i] = _margin(cfg, np.linalg.norm(V[i]), np.linalg.norm(W[i]), o.radius, dt)
    kin_verts = {}
    for k, b in enumerate(kin):
        j = len(objs) + k
        kin_verts[j] = b.hull.vertices @ R[j].T + X[j]
        rad = float(np.linalg.norm(b.hull.vertices, axis=1).max())
        margins[j] = _margin(cfg, np.linalg.norm(V[j]), np.linalg.norm(W[j]), rad, dt)

    frames = [o.pose for o in objs] + [b.pose for b in kin]

    # table contacts, one per supported hull vertex
    n_table = world.table.normal
    for i, o in enumerate(objs):
        if not o.is_dynamic:
            continue
        pts = world_verts[i]
        sep = world.table.signed_distance(pts)
        idx = np.nonzero(sep < margins[i])[0]
        if len(idx) == 0:
            continue
        idx = idx[_plane_support_mask(pts[idx], world.table, world.workspace)]
        idx = _reduce_plane_points(idx, pts[idx], world.table) if len(idx) > MANIFOLD_MAX else idx
        for k in idx:
            add(i, static, pts[k], n_table, float(sep[k]), o.params.friction, o.params.restitution)

    # object-object and object-kinematic pairs
    hulls = [o.hull for o in objs] + [b.hull for b in kin]
    bodies = [(i, o.hull, o.radius, o.params.friction, o.params.restitution, o.is_dynamic, o.id, frozenset())
              for i, o in enumerate(objs)]
    for k, b in enumerate(kin):
        j = len(objs) + k
        bodies.append((j, b.hull, float(np.linalg.norm(b.hull.vertices, axis=1).max()), b.friction, 0.0,
                       False, b.id, b.ignore))
    for p in range(len(bodies)):
        ia, _, ra_, mua, ea, dyn_a, ida, ign_a = bodies[p]
        for q in range(p + 1, len(bodies)):
            ib, _, rb_, mub, eb, dyn_b, idb, ign_b = bodies[q]
            if not (dyn_a or dyn_b):
                continue
            if ida in ign_b or idb in ign_a:
                continue
            margin = margins[ia] + margins[ib]
            if np.linalg.norm(X[ia] - X[ib]) > ra_ + rb_ + margin:
                continue
            va = world_verts.get(ia, kin_verts.get(ia))
            vb = world_verts.get(ib, kin_verts.get(ib))
            contacts = contacts_between(hulls[ia], frames[ia], va, hulls[ib], frames[ib], vb, margin)
            if not contacts:
                continue
            mu = math.sqrt(mua * mub)
            e = max(ea, eb)
            for c in contacts:
                add(ia, ib, c.point, c.normal, -c.depth, mu, e)

    if rows_a:
        A = np.array(rows_a, dtype=np.int64)
        B = np.array(rows_b, dtype=np.int64)
        P = np.array(points)
        N = np.array(normals)
        sep = np.array(seps)
        RA = P - X[A]
        RB = P - X[B]
        vrel = (V[A] + np.cross(W[A], RA)) - (V[B] + np.cross(W[B], RB))
        vn0 = np.einsum("ij,ij->i", vrel, N)
        target = np.where(sep > 0, -sep / dt, cfg.baumgarte * np.maximum(-sep - cfg.slop, 0.0) / dt)
        e = np.array(rests)
        bounce = (sep <= cfg.slop) & (vn0 < -RESTITUTION_THRESHOLD) & (e > 0)
        target = np.where(bounce, np.maximum(target, -e * vn0), target)
        keys = [(names[a], names[b]) for a, b in zip(rows_a, rows_b)]
        local = np.einsum("kji,kj->ki", R[A], RA)  # contact points in A's frame
        jn0, jt0 = _warm_start(world.contact_cache, keys, local)
        jn, jt = solve(V, W, IM, II, A, B, RA, RB, N, target, np.array(mus), jn0, jt0, cfg.iterations,
                       cfg.max_iterations, cfg.tolerance)
        cache = {}
        for k, key in enumerate(keys):
            cache.setdefault(key, []).append(k)
        world.contact_cache = {key: (local[idx], jn[idx], jt[idx]) for key, idx in cache.items()}
    else:
        world.contact_cache = {}

    deltas = {}
    for i, o in enumerate(objs):
        if not o.is_dynamic:
            deltas[o.id] = PoseDelta.identity()
            continue
        pos = X[i] + V[i] * dt
        rot = quat_normalize(quat_multiply(quat_exp(W[i] * dt), o.state.orientation))
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(rot))
                and np.all(np.isfinite(V[i])) and np.all(np.isfinite(W[i]))):
            raise NonFiniteState(f"object {o.id!r} diverged at t={world.time:.6f}")
        o.state.position = pos
        o.state.orientation = rot
        o.state.velocity = V[i].copy()
        o.state.angular_velocity = W[i].copy()
        deltas[o.id] = PoseDelta(pos - old_pos[i], quat_normalize(quat_multiply(rot, quat_conjugate(old_rot[i]))))
    world.time += dt
    return deltas


def _warm_start(cache, keys, local):
    m = len(keys)
    jn0 = np.zeros(m)
    jt0 = np.zeros((m, 3))
    for k, key in enumerate(keys):
        prev = cache.get(key)
        if prev is None:
            continue
        pts, jn, jt = prev
        d = np.linalg.norm(pts - local[k], axis=1)
        j = int(np.argmin(d))
        if d[j] <= WARM_START_RADIUS:
            jn0[k] = jn[j]
            jt0[k] = jt[j]
    return jn0, jt0
