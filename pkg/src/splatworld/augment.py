"""Equivariant demonstration augmentation: transforms, replay, verification and the grid."""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import GripperAgent, execute_demo
from .core import RigidTransform, compose, quat_conjugate, quat_normalize, rotate_about_point, rotz
from .dynamics import WorldState
from .errors import EmptyActionList, IdMismatch, InvalidStep, SplatWorldError
from .splat import world_splats

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.015


class TransformKind(str, enum.Enum):
    REPLAY = "replay"
    ROTO_TRANSLATION = "roto_translation"
    OBJECT_ROTATION = "object_rotation"


@dataclass(frozen=True)
class TransformSpec:
    """A rigid augmentation ``x -> R (x - P) + P + t``.

    For object rotations ``point`` may be left ``None``; it then resolves to the
    last end-effector position of the demonstration being transformed.
    """

    kind: TransformKind
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    point: np.ndarray | None = field(default_factory=lambda: np.zeros(3))
    angle_deg: float = 0.0

    def __post_init__(self):
        kind = TransformKind(self.kind)
        rot = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        p = None if self.point is None else np.asarray(self.point, dtype=np.float64).reshape(3)
        if kind is TransformKind.REPLAY and (not np.array_equal(rot, [1.0, 0.0, 0.0, 0.0]) or np.any(t)):
            raise ValueError("a replay spec must be the identity")
        if kind is TransformKind.OBJECT_ROTATION and np.any(t):
            raise ValueError("an object rotation has no translation")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "point", p)

    @classmethod
    def replay(cls):
        return cls(TransformKind.REPLAY)

    @classmethod
    def translation_xy(cls, dx, dy):
        return cls(TransformKind.ROTO_TRANSLATION, translation=[dx, dy, 0.0])

    @classmethod
    def env_rotation(cls, angle_deg, center, translation=(0.0, 0.0, 0.0)):
        return cls(TransformKind.ROTO_TRANSLATION, rotz(math.radians(angle_deg)), translation, center, angle_deg)

    @classmethod
    def object_rotation(cls, angle_deg, point=None):
        return cls(TransformKind.OBJECT_ROTATION, rotz(math.radians(angle_deg)), np.zeros(3), point, angle_deg)

    def resolved(self, demo: Demonstration) -> TransformSpec:
        if self.point is not None:
            return self
        if not demo.actions:
            raise EmptyActionList("object rotation needs a non-empty action list")
        return replace(self, point=np.array(demo.actions[-1].et))

    def inverse(self) -> TransformSpec:
        """The spec undoing this one: rotation ``R^-1`` about ``P + t``, then translation ``-t``."""
        if self.point is None:
            raise ValueError("unresolved application point")
        return replace(self, rotation=quat_conjugate(self.rotation), translation=-self.translation,
                       point=self.point + self.translation, angle_deg=-self.angle_deg)

    @property
    def transform(self) -> RigidTransform:
        if self.point is None:
            raise ValueError("unresolved application point")
        return compose(RigidTransform.from_translation(self.translation), rotate_about_point(self.rotation, self.point))


@dataclass
class Demonstration:
    task: str
    actions: list
    initial_poses: dict
    goal_poses: dict
    observations: list = field(default_factory=list)

    def __post_init__(self):
        missing = set(self.goal_poses) - set(self.initial_poses)
        if missing:
            raise IdMismatch(f"goal poses for unknown objects: {sorted(missing)}")

    def goal_positions(self) -> dict:
        return {k: np.asarray(v.translation) for k, v in self.goal_poses.items()}


@dataclass
class GridConfig:
    xy_offsets: tuple = (0.0, 0.15, -0.15)
    env_rot_center: tuple = (0.30, 0.0, 0.0)
    env_rot_step: float = 30.0
    traj_rot_step: float = 20.0
    tau: float = DEFAULT_TAU
    compose: bool = False  # also pair every translation with every environment rotation

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("env_rot_step", "traj_rot_step"):
            _turns(getattr(self, name), name)


def _turns(step, name="step"):
    if not step > 0:
        raise InvalidStep(f"{name} must be positive, got {step}")
    n = 360.0 / step
    if abs(n - round(n)) > 1e-9:
        raise InvalidStep(f"{name} = {step} does not divide 360")
    return int(round(n))


@dataclass
class AugmentResult:
    spec: TransformSpec
    accepted: bool
    errors: dict
    demo: Demonstration | None
    observations: list = field(default_factory=list)
    failure: str | None = None

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else math.inf


@dataclass
class VerifyResult:
    accepted: bool
    errors: dict


# ---------------------------------------------------------------------------
# transforms


def transform_world(world: WorldState, t: RigidTransform, *, objects=True, environment=True) -> WorldState:
    """A copy of ``world`` with objects and/or environment moved by ``t``."""
    out = world.copy()
    rot = t.rotation_matrix
    if objects:
        for o in out.objects:
            pose = compose(t, o.pose)
            o.state.position = np.array(pose.translation)
            o.state.orientation = np.array(pose.rotation)
            o.state.velocity = rot @ o.state.velocity
            o.state.angular_velocity = rot @ o.state.angular_velocity
        out.contact_cache = {k: (pts, jn, jt @ rot.T) for k, (pts, jn, jt) in out.contact_cache.items()}
    if environment:
        out.table = out.table.transformed(t)
        if out.workspace is not None:
            out.workspace = out.workspace.transformed(t)
        if len(out.background_splats):
            out.background_splats = world_splats(t, out.background_splats)
    return out


def _transform_demo(demo: Demonstration, t: RigidTransform) -> Demonstration:
    return Demonstration(
        demo.task,
        [a.transformed(t) for a in demo.actions],
        {k: compose(t, v) for k, v in demo.initial_poses.items()},
        {k: compose(t, v) for k, v in demo.goal_poses.items()},
        [],
    )


def roto_translate(world: WorldState, demo: Demonstration, spec: TransformSpec):
    """Move the whole scene (objects, table, background) and the actions by the spec.

    The gripper's starting pose is not part of the world and stays where it is.
    """
    if spec.kind is TransformKind.OBJECT_ROTATION:
        raise ValueError("use rotate_objects_about_final for object rotations")
    t = spec.transform
    return transform_world(world, t), _transform_demo(demo, t)


def rotate_objects_about_final(world: WorldState, demo: Demonstration, angle_deg: float):
    """Rotate objects and actions about the last end-effector position; the environment stays."""
    if not demo.actions:
        raise EmptyActionList("demonstration has no actions")
    spec = TransformSpec.object_rotation(angle_deg).resolved(demo)
    t = spec.transform
    return transform_world(world, t, environment=False), _transform_demo(demo, t)


def apply_spec(world: WorldState, demo: Demonstration, spec: TransformSpec):
    """Dispatch on the spec kind; returns ``(world', demo', resolved_spec)``."""
    if spec.kind is TransformKind.REPLAY:
        return world.copy(), _transform_demo(demo, RigidTransform.identity()), spec
    if spec.kind is TransformKind.ROTO_TRANSLATION:
        w, d = roto_translate(world, demo, spec)
        return w, d, spec
    spec = spec.resolved(demo)
    w, d = rotate_objects_about_final(world, demo, spec.angle_deg)
    return w, d, spec


def expected_goal(goal, spec: TransformSpec):
    """``R (l - P) + P + t`` for a recorded goal position ``l``."""
    goal = np.asarray(goal.translation if isinstance(goal, RigidTransform) else goal, dtype=np.float64)
    return spec.transform.apply(goal)


def verify(recorded: dict, simulated: dict, spec: TransformSpec, tau: float = DEFAULT_TAU) -> VerifyResult:
    """Accept iff every object lands within ``tau`` of its transformed recorded goal."""
    if set(recorded) != set(simulated):
        raise IdMismatch(f"goal ids differ: {sorted(set(recorded) ^ set(simulated))}")
    errors = {}
    for oid in sorted(recorded):
        sim = simulated[oid]
        sim = np.asarray(sim.translation if isinstance(sim, RigidTransform) else sim, dtype=np.float64)
        errors[oid] = float(np.linalg.norm(sim - expected_goal(recorded[oid], spec)))
    return VerifyResult(all(e < tau for e in errors.values()), errors)


def generate_grid(cfg: GridConfig | None = None) -> list:
    """Replay, xy translations (row-major), environment rotations, object rotations.

    The identity appears only as the replay spec.
    """
    cfg = cfg or GridConfig()
    n_env = _turns(cfg.env_rot_step, "env_rot_step")
    n_traj = _turns(cfg.traj_rot_step, "traj_rot_step")
    offsets = list(dict.fromkeys(float(x) for x in cfg.xy_offsets))
    specs = [TransformSpec.replay()]
    shifts = [(dx, dy) for dx in offsets for dy in offsets if (dx, dy) != (0.0, 0.0)]
    specs += [TransformSpec.translation_xy(dx, dy) for dx, dy in shifts]
    center = np.asarray(cfg.env_rot_center, dtype=np.float64)
    angles = [k * cfg.env_rot_step for k in range(1, n_env)]
    specs += [TransformSpec.env_rotation(a, center) for a in angles]
    if cfg.compose:
        specs += [TransformSpec.env_rotation(a, center, (dx, dy, 0.0)) for dx, dy in shifts for a in angles]
    specs += [TransformSpec.object_rotation(k * cfg.traj_rot_step) for k in range(1, n_traj)]
    return specs


# ---------------------------------------------------------------------------
# pipeline


def world_at(world: WorldState, poses: dict) -> WorldState:
    """Copy of ``world`` with objects placed at ``poses`` and at rest."""
    out = world.copy()
    for o in out.objects:
        if o.id in poses:
            o.state.position = np.array(poses[o.id].translation)
            o.state.orientation = np.array(poses[o.id].rotation)
        o.state.velocity = np.zeros(3)
        o.state.angular_velocity = np.zeros(3)
    out.contact_cache = {}
    return out


def record_demo(world: WorldState, agent: GripperAgent, actions, task: str = "") -> Demonstration:
    """Execute ``actions`` and store the result as a demonstration."""
    actions = list(actions)
    if not actions:
        raise EmptyActionList("a demonstration needs at least one action")
    start = world.poses()
    run = execute_demo(world_at(world, start), agent, actions)
    if run.failed:
        raise SplatWorldError(f"recording failed: {run.error}")
    return Demonstration(task, actions, start, run.goals)


def _run_job(world_template, agent, demo, spec, cfg, render, cameras, render_opts):
    world = world_at(world_template, demo.initial_poses)
    try:
        w2, d2, spec = apply_spec(world, demo, spec)
        run = execute_demo(w2, agent, d2.actions)
        if run.failed:
            return AugmentResult(spec, False, {}, None, failure=run.error)
        check = verify(demo.goal_positions(), run.goals, spec, cfg.tau)
        d2.goal_poses = run.goals
        observations = []
        if check.accepted and render and cameras:
            observations = execute_demo(w2, agent, d2.actions, cameras, render=True,
                                        render_opts=render_opts).observations
        return AugmentResult(spec, check.accepted, check.errors, d2, observations)
    except SplatWorldError as exc:
        return AugmentResult(spec, False, {}, None, failure=f"{type(exc).__name__}: {exc}")


@dataclass
class AugmentReport:
    results: list  # [(demo_index, spec_index, AugmentResult)]
    stats: dict


def augment_dataset(world_template: WorldState, agent: GripperAgent, demos, cfg: GridConfig | None = None,
                    render: bool = False, cameras=(), jobs: int = 1, render_opts=None) -> AugmentReport:
    """Every demo under every grid spec; results in (demo, spec) order whatever ``jobs`` is."""
    cfg = cfg or GridConfig()
    specs = generate_grid(cfg)
    tasks = [(d, s, demo, spec) for d, demo in enumerate(demos) for s, spec in enumerate(specs)]

    def work(task):
        d, s, demo, spec = task
        return d, s, _run_job(world_template, agent, demo, spec, cfg, render, cameras, render_opts)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    accepted = sum(1 for _, _, r in results if r.accepted)
    stats = summarize(len(results), accepted)
    log.info("augmentation: %d/%d accepted", accepted, len(results))
    return AugmentReport(results, stats)


def summarize(generated: int, accepted: int) -> dict:
    return {"generated": generated, "accepted": accepted,
            "acceptance_ratio": accepted / generated if generated else 0.0}


@dataclass
class ReplayReport:
    errors: dict
    mean: float
    goals: dict


def replay_error_report(demo: Demonstration, world: WorldState, agent: GripperAgent) -> ReplayReport:
    """Replay ``demo`` from its initial poses; distance of each recorded goal to the simulated one."""
    run = execute_demo(world_at(world, demo.initial_poses), agent, demo.actions)
    if run.failed:
        raise SplatWorldError(f"replay failed: {run.error}")
    errors = {k: float(np.linalg.norm(np.asarray(demo.goal_poses[k].translation) - run.goals[k].translation))
              for k in sorted(demo.goal_poses)}
    mean = float(np.mean(list(errors.values()))) if errors else 0.0
    return ReplayReport(errors, mean, run.goals)
