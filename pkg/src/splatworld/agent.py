"""Kinematic gripper agent: waypoint interpolation, grasping and demo execution."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Camera,
    RgbdImage,
    RigidTransform,
    compose,
    quat_angle,
    quat_conjugate,
    quat_log_signed,
    quat_multiply,
    quat_normalize,
    slerp,
)
from .dynamics import KinematicBody, WorldState, settle
from .dynamics.collision import separation
from .errors import NonFiniteState, SplatWorldError, UnreachableTarget
from .mesh import ConvexHull, box_mesh, convex_hull
from .splat import GaussianSet, RenderOptions, render_downsampled, world_splats

GRIPPER_ID = "__gripper__"
OBSERVATION_SIZE = 128


@dataclass(frozen=True)
class Action:
    """Target end-effector pose and gripper state. ``collide`` is carried, not acted on."""

    et: np.ndarray
    er: np.ndarray
    open: bool = True
    collide: bool = False

    def __post_init__(self):
        et = np.array(self.et, dtype=np.float64).reshape(3)
        er = np.array(self.er, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(et)) or not np.all(np.isfinite(er)) or not np.linalg.norm(er) > 0:
            raise ValueError("action pose must be finite with a non-zero quaternion")
        er = quat_normalize(er)
        et.flags.writeable = False
        er.flags.writeable = False
        object.__setattr__(self, "et", et)
        object.__setattr__(self, "er", er)
        object.__setattr__(self, "open", bool(self.open))
        object.__setattr__(self, "collide", bool(self.collide))

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.er, self.et)

    @classmethod
    def at(cls, pose: RigidTransform, open: bool = True, collide: bool = False) -> Action:
        return cls(pose.translation, pose.rotation, open, collide)

    def transformed(self, t: RigidTransform) -> Action:
        return Action.at(compose(t, self.pose), self.open, self.collide)


def _default_finger_hull() -> ConvexHull:
    return convex_hull(box_mesh((0.01, 0.01, 0.02)).vertices)


@dataclass
class GripperAgent:
    """A free-flying gripper. Its pose is the grasp center; the arm is not modelled.

    ``grasp_region`` is ``(lo, hi)`` of an axis-aligned box in the gripper frame.
    The finger hull collides only while the gripper is closed and holds nothing.
    """

    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    open: bool = True
    splats: GaussianSet | None = None
    finger_hull: ConvexHull = field(default_factory=_default_finger_hull)
    grasp_region: tuple = ((-0.03, -0.03, -0.03), (0.03, 0.03, 0.03))
    attached: str | None = None
    attached_rel: RigidTransform | None = None
    max_step_t: float = 0.002
    max_step_r: float = 0.02
    friction: float = 0.5

    def __post_init__(self):
        lo, hi = (np.asarray(v, dtype=np.float64).reshape(3) for v in self.grasp_region)
        if np.any(hi <= lo):
            raise ValueError("grasp region must have positive extent")
        self.grasp_region = (lo, hi)
        if self.max_step_t <= 0 or self.max_step_r <= 0:
            raise ValueError("interpolation steps must be positive")

    def copy(self) -> GripperAgent:
        return copy.copy(self)

    def grasp_box(self) -> np.ndarray:
        """World-frame corners of the grasp region."""
        lo, hi = self.grasp_region
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        return self.pose.apply(corners)

    def world_splats(self) -> GaussianSet | None:
        if self.splats is None or len(self.splats) == 0:
            return None
        return world_splats(self.pose, self.splats)

    def transformed(self, t: RigidTransform) -> GripperAgent:
        dup = self.copy()
        dup.pose = compose(t, self.pose)
        return dup


@dataclass(frozen=True)
class Event:
    kind: str  # "attach", "detach" or "contact"
    object_id: str
    step: int


def interpolate_waypoints(a: RigidTransform, b: RigidTransform, max_step_t: float, max_step_r: float):
    """Poses from ``a`` (exclusive) to ``b`` (inclusive) in equal steps.

    The step count is the smallest keeping both the translation and the rotation
    increments within bounds; rotation follows the constant-speed geodesic.
    """
    if max_step_t <= 0 or max_step_r <= 0:
        raise ValueError("step bounds must be positive")
    dist = float(np.linalg.norm(b.translation - a.translation))
    angle = quat_angle(quat_multiply(b.rotation, quat_conjugate(a.rotation)))
    n = max(1, math.ceil(dist / max_step_t - 1e-9), math.ceil(angle / max_step_r - 1e-9))
    poses = []
    for k in range(1, n):
        t = k / n
        poses.append(RigidTransform(slerp(a.rotation, b.rotation, t),
                                    a.translation + t * (b.translation - a.translation)))
    poses.append(b)
    return poses


def _grasp_candidate(world: WorldState, agent: GripperAgent):
    region = agent.grasp_box()
    center = agent.pose.translation
    best = None
    for o in world.objects:
        if o.params.fixed:
            continue
        verts = o.pose.apply(o.hull.vertices)
        sep, _, _, _ = separation(verts, region, o.state.position - center)
        if sep > 0:
            continue
        key = (float(np.linalg.norm(o.state.position - center)), o.id)
        if best is None or key < best[0]:
            best = (key, o)
    return None if best is None else best[1]


def _sync_gripper(world: WorldState, agent: GripperAgent, velocity, angular_velocity):
    body = world.kinematic.get(GRIPPER_ID)
    if body is None:
        body = KinematicBody(GRIPPER_ID, agent.finger_hull, agent.pose, friction=agent.friction)
        world.kinematic[GRIPPER_ID] = body
    body.pose = agent.pose
    body.velocity = np.asarray(velocity, dtype=np.float64)
    body.angular_velocity = np.asarray(angular_velocity, dtype=np.float64)
    body.enabled = (not agent.open) and agent.attached is None
    body.ignore = frozenset([agent.attached]) if agent.attached else frozenset()
    if agent.attached is not None:
        obj = world.object(agent.attached)
        pose = compose(agent.pose, agent.attached_rel)
        obj.kinematic = True
        obj.state.position = np.array(pose.translation)
        obj.state.orientation = np.array(pose.rotation)
        obj.state.velocity = body.velocity + np.cross(body.angular_velocity, obj.state.position - agent.pose.translation)
        obj.state.angular_velocity = body.angular_velocity.copy()


def _touching(world: WorldState, ids) -> set:
    touched = set()
    for (a, b), (_, jn, _) in world.contact_cache.items():
        if np.any(jn > 0):
            if a in ids:
                touched.add(b)
            if b in ids:
                touched.add(a)
    return touched


def execute_action_in_place(world: WorldState, agent: GripperAgent, action: Action, step0: int = 0) -> list:
    """Run ``action`` mutating ``world`` and ``agent``; returns ``(events, steps taken)``."""
    events = []
    seen_contacts = set()
    dt = world.dt
    for k, target in enumerate(interpolate_waypoints(agent.pose, action.pose, agent.max_step_t, agent.max_step_r)):
        prev = agent.pose
        velocity = (target.translation - prev.translation) / dt
        angular = quat_log_signed(quat_multiply(target.rotation, quat_conjugate(prev.rotation))) / dt
        agent.pose = target
        _sync_gripper(world, agent, velocity, angular)
        try:
            world.step()
        except NonFiniteState as exc:
            raise UnreachableTarget(f"simulation diverged while moving to {action.et}: {exc}") from exc
        movers = {GRIPPER_ID} | ({agent.attached} if agent.attached else set())
        for oid in sorted(_touching(world, movers) - movers - seen_contacts - {"__table__"}):
            seen_contacts.add(oid)
            events.append(Event("contact", oid, step0 + k))
    n_steps = k + 1
    # the gripper halts on the waypoint
    _sync_gripper(world, agent, np.zeros(3), np.zeros(3))
    if agent.open and not action.open:
        obj = _grasp_candidate(world, agent)
        if obj is not None:
            agent.attached = obj.id
            agent.attached_rel = compose(agent.pose.inverse(), obj.pose)
            obj.kinematic = True
            events.append(Event("attach", obj.id, step0 + n_steps))
    elif not agent.open and action.open and agent.attached is not None:
        obj = world.object(agent.attached)
        obj.kinematic = False
        obj.state.velocity = np.zeros(3)
        obj.state.angular_velocity = np.zeros(3)
        events.append(Event("detach", obj.id, step0 + n_steps))
        agent.attached = None
        agent.attached_rel = None
    agent.open = action.open
    _sync_gripper(world, agent, np.zeros(3), np.zeros(3))
    world.contact_cache = {k: v for k, v in world.contact_cache.items() if GRIPPER_ID not in k}
    return events, n_steps


def execute_action(world: WorldState, agent: GripperAgent, action: Action):
    """Functional form: returns ``(world', agent', events)``; the inputs are untouched."""
    world, agent = world.copy(), agent.copy()
    events, _ = execute_action_in_place(world, agent, action)
    return world, agent, events


@dataclass
class Observation:
    action_index: int
    camera: str
    image: RgbdImage


@dataclass
class DemoRun:
    world: WorldState
    agent: GripperAgent
    observations: list
    goals: dict
    events: list
    steps: int
    failed: bool = False
    error: str | None = None


def render_world(world: WorldState, agent: GripperAgent | None, camera: Camera,
                 size: int = OBSERVATION_SIZE, opts: RenderOptions | None = None, threads: int = 1) -> RgbdImage:
    parts = [world.background_splats] + [o.world_splats() for o in world.objects if len(o.splats)]
    if agent is not None and agent.world_splats() is not None:
        parts.append(agent.world_splats())
    scene = GaussianSet.concatenate([p for p in parts if p is not None])
    return render_downsampled(scene, camera.intrinsics, camera.pose, size, size, opts, threads)


def execute_demo(world: WorldState, agent: GripperAgent, actions, cameras=(), render: bool = False,
                 render_opts: RenderOptions | None = None, settle_steps: int = 480,
                 size: int = OBSERVATION_SIZE) -> DemoRun:
    """Execute ``actions`` in order, settle, and record every object's final pose.

    With ``render`` one RGB-D observation per camera is taken after each action.
    Failures are reported on the result with the observations gathered so far.
    """
    world, agent = world.copy(), agent.copy()
    observations, events = [], []
    steps = 0
    try:
        for i, action in enumerate(actions):
            ev, n = execute_action_in_place(world, agent, action, steps)
            events.extend(ev)
            steps += n
            if render:
                for cam in cameras:
                    observations.append(Observation(i, cam.name, render_world(world, agent, cam, size, render_opts)))
        _sync_gripper(world, agent, np.zeros(3), np.zeros(3))
        result = settle(world, settle_steps)
        world = result.world
        steps += result.steps
    except SplatWorldError as exc:
        return DemoRun(world, agent, observations, world.poses(), events, steps, True, str(exc))
    return DemoRun(world, agent, observations, world.poses(), events, steps)
