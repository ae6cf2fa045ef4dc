"""File formats: scene and demo JSON, splat PLY, mesh OBJ, RGB and depth PNG.

Scene and demo documents reference bulk data by paths relative to the document.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .agent import Action, GripperAgent
from .augment import Demonstration
from .core import Camera, CameraIntrinsics, CameraPose, RgbdImage, RigidTransform, quat_normalize
from .dynamics import ObjectAsset, PhysicalParams, WorldState
from .errors import ParseError, UnknownField
from .mesh import Plane, TriangleMesh, convex_hull
from .splat import GaussianSet

# ---------------------------------------------------------------------------
# small JSON helpers


def _require(doc, key, where):
    if not isinstance(doc, dict):
        raise ParseError("expected an object", field=where)
    if key not in doc:
        raise ParseError("missing", field=f"{where}.{key}" if where else key)
    return doc[key]


def _check_fields(doc, allowed, where, strict):
    if strict and isinstance(doc, dict):
        extra = sorted(set(doc) - set(allowed))
        if extra:
            raise UnknownField(f"unknown field(s) {extra}", field=where or "<root>")


def _vector(value, n, where):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"expected {n} numbers", field=where) from exc
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ParseError(f"expected {n} finite numbers, got {value!r}", field=where)
    return arr


def _quat(value, where):
    q = _vector(value, 4, where)
    norm = np.linalg.norm(q)
    if not norm > 1e-12:
        raise ParseError("quaternion has zero norm", field=where)
    return quat_normalize(q)


def _number(value, where, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"expected a finite number, got {value!r}", field=where)
    return float(value)


def _flag(value, where):
    if not isinstance(value, bool):
        raise ParseError(f"expected true/false, got {value!r}", field=where)
    return value


def pose_from_json(doc, where="pose", strict=True) -> RigidTransform:
    _check_fields(doc, ("t", "q"), where, strict)
    return RigidTransform(_quat(_require(doc, "q", where), f"{where}.q"), _vector(_require(doc, "t", where), 3, f"{where}.t"))


def pose_to_json(pose: RigidTransform) -> dict:
    return {"t": [float(x) for x in pose.translation], "q": [float(x) for x in pose.rotation]}


def _dump(doc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def _load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc


# ---------------------------------------------------------------------------
# PLY

_PLY_BASE = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_u", "scale_v", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2"]
_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
              "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
              "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8"}


def _ply_names(n_rest):
    return _PLY_BASE + [f"f_rest_{i}" for i in range(n_rest)]


def save_splats_ply(splats: GaussianSet, path):
    """Binary little-endian PLY with one double property per field.

    ``f_dc_*`` hold the degree-0 SH coefficients; higher bands go to ``f_rest_*``
    channel-major (all red coefficients, then green, then blue).
    """
    n = len(splats)
    k = splats.sh.shape[1]
    rest = splats.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1) if k > 1 else np.zeros((n, 0))
    cols = [splats.means, splats.quats, splats.scales, splats.opacities[:, None], splats.sh[:, 0, :], rest]
    data = np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f8")
    names = _ply_names(rest.shape[1])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_splats_ply(path) -> GaussianSet:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file", line=1)
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    fmt, count, props = None, None, []
    in_vertex = False
    for i, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            in_vertex = len(parts) == 3 and parts[1] == "vertex"
            if in_vertex:
                try:
                    count = int(parts[2])
                except ValueError as exc:
                    raise ParseError(f"{path}: bad vertex count", line=i) from exc
            elif count is not None:
                raise ParseError(f"{path}: only a single vertex element is supported", line=i)
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"{path}: unsupported property {line!r}", line=i)
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"{path}: unexpected header line {line!r}", line=i)
    if fmt != "binary_little_endian":
        raise ParseError(f"{path}: format must be binary_little_endian", field="format")
    if count is None:
        raise ParseError(f"{path}: no vertex element", field="element")
    names = [p[0] for p in props]
    for name in _PLY_BASE:
        if name not in names:
            raise ParseError(f"{path}: missing property", field=name)
    dtype = np.dtype(props)
    if len(body) != count * dtype.itemsize:
        raise ParseError(f"{path}: expected {count * dtype.itemsize} bytes of vertex data, got {len(body)}")
    rec = np.frombuffer(body, dtype=dtype, count=count)

    def col(*keys):
        return np.stack([rec[k].astype(np.float64) for k in keys], axis=1) if count else np.zeros((0, len(keys)))

    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    if n_rest % 3:
        raise ParseError(f"{path}: f_rest count {n_rest} is not a multiple of 3", field="f_rest")
    sh = np.zeros((count, 1 + n_rest // 3, 3))
    sh[:, 0, :] = col("f_dc_0", "f_dc_1", "f_dc_2")
    if n_rest:
        rest = col(*[f"f_rest_{i}" for i in range(n_rest)])
        sh[:, 1:, :] = rest.reshape(count, 3, -1).transpose(0, 2, 1)
    try:
        return GaussianSet(col("x", "y", "z"), col("rot_w", "rot_x", "rot_y", "rot_z"), col("scale_u", "scale_v"),
                           col("opacity")[:, 0], sh)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# OBJ


def save_mesh_obj(mesh: TriangleMesh, path):
    """ASCII OBJ; vertex colors, when present, follow the position on each ``v`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    for i, v in enumerate(mesh.vertices):
        line = "v " + " ".join(repr(float(x)) for x in v)
        if mesh.colors is not None:
            line += " " + " ".join(repr(float(c)) for c in mesh.colors[i])
        out.append(line)
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(out) + "\n")


def load_mesh_obj(path) -> TriangleMesh:
    verts, colors, faces = [], [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    for i, line in enumerate(text.splitlines(), start=1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) not in (3, 6):
                    raise ValueError("v needs 3 or 6 numbers")
                verts.append(vals[:3])
                colors.append(vals[3:] if len(vals) == 6 else None)
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("f needs at least 3 vertices")
                idx = [k - 1 if k > 0 else len(verts) + k for k in idx]
                faces += [[idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1)]
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=i) from exc
    has_colors = bool(colors) and all(c is not None for c in colors)
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3),
                            np.array(colors) if has_colors else None)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# images


def save_rgb_png(image, path):
    rgb8 = image.rgb8 if isinstance(image, RgbdImage) else np.asarray(image)
    if rgb8.dtype != np.uint8:
        rgb8 = np.clip(np.round(np.asarray(rgb8, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb8, mode="RGB").save(path, format="PNG")


def load_rgb_png(path) -> np.ndarray:
    """RGB values as float in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize_depth(depth) -> np.ndarray:
    """Meters to uint16 millimeters, round-half-even.

    Invalid, non-positive and unrepresentable (> 65.535 m) depths map to 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    mm = np.round(np.where(ok, depth, 0.0) * 1000.0)
    return np.where(ok & (mm <= 65535), mm, 0.0).astype(np.uint16)


def save_depth_png(depth, path):
    depth = depth.depth if isinstance(depth, RgbdImage) else depth
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize_depth(depth)).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ParseError(f"{path}: depth PNG must be single-channel")
    return arr.astype(np.float64) / 1000.0


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def save_rgbd(image: RgbdImage, stem) -> tuple:
    """Write ``<stem>.png`` and ``<stem>_depth.png``."""
    stem = str(stem)
    save_rgb_png(image, stem + ".png")
    save_depth_png(image.depth, stem + "_depth.png")
    return stem + ".png", stem + "_depth.png"


# ---------------------------------------------------------------------------
# cameras


def intrinsics_from_json(doc, where, strict=True) -> CameraIntrinsics:
    _check_fields(doc, ("fx", "fy", "cx", "cy", "w", "h"), where, strict)
    vals = {k: _number(_require(doc, k, where), f"{where}.{k}") for k in ("fx", "fy", "cx", "cy", "w", "h")}
    try:
        return CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["w"]), int(vals["h"]))
    except ValueError as exc:
        raise ParseError(str(exc), field=where) from exc


def camera_from_json(doc, where, strict=True) -> Camera:
    _check_fields(doc, ("name", "intrinsics", "pose"), where, strict)
    name = _require(doc, "name", where)
    if not isinstance(name, str):
        raise ParseError("expected a string", field=f"{where}.name")
    return Camera(name, intrinsics_from_json(_require(doc, "intrinsics", where), f"{where}.intrinsics", strict),
                  CameraPose(pose_from_json(_require(doc, "pose", where), f"{where}.pose", strict)))


def camera_to_json(cam: Camera) -> dict:
    k = cam.intrinsics
    return {"name": cam.name,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "w": k.width, "h": k.height},
            "pose": pose_to_json(cam.pose.world_from_camera)}


def load_cameras(path, strict=True) -> list:
    """A ``{"cameras": [...]}`` document (or a bare list of cameras)."""
    doc = _load_json(path)
    if isinstance(doc, dict):
        _check_fields(doc, ("cameras",), "", strict)
        doc = _require(doc, "cameras", "")
    if not isinstance(doc, list):
        raise ParseError("expected a list of cameras", field="cameras")
    cams = [camera_from_json(c, f"cameras[{i}]", strict) for i, c in enumerate(doc)]
    _unique([c.name for c in cams], "cameras")
    return cams


def save_cameras(cameras, path):
    _dump({"cameras": [camera_to_json(c) for c in cameras]}, path)


def _unique(names, where):
    if len(set(names)) != len(names):
        raise ParseError(f"duplicate names {sorted(n for n in set(names) if names.count(n) > 1)}", field=where)


# ---------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    world: WorldState
    cameras: list = field(default_factory=list)
    agent: GripperAgent = field(default_factory=GripperAgent)

    def camera(self, name: str) -> Camera:
        for c in self.cameras:
            if c.name == name:
                return c
        raise KeyError(name)


_SCENE_FIELDS = ("objects", "table", "workspace", "background_splats", "cameras", "gravity", "dt", "agent")
_OBJECT_FIELDS = ("id", "splats", "mesh", "pose", "physical")
_PHYSICAL_FIELDS = ("mass", "friction", "restitution", "fixed")


def _resolve(base: Path, rel, where):
    if not isinstance(rel, str):
        raise ParseError("expected a path string", field=where)
    p = (base / rel) if not os.path.isabs(rel) else Path(rel)
    if not p.exists():
        raise ParseError(f"referenced file {p} does not exist", field=where)
    return p


def _physical(doc, where, strict):
    if doc is None:
        return PhysicalParams()
    _check_fields(doc, _PHYSICAL_FIELDS, where, strict)
    fixed = _flag(doc.get("fixed", False), f"{where}.fixed")
    mass = _number(doc.get("mass", None if fixed else 0.2), f"{where}.mass", allow_none=fixed)
    try:
        return PhysicalParams(math.inf if mass is None else mass,
                              _number(doc.get("friction", 0.5), f"{where}.friction"),
                              _number(doc.get("restitution", 0.0), f"{where}.restitution"), fixed)
    except ValueError as exc:
        raise ParseError(str(exc), field=where) from exc


def load_scene(path, strict: bool = True) -> Scene:
    path = Path(path)
    base = path.parent
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ParseError("scene must be a JSON object")
    _check_fields(doc, _SCENE_FIELDS, "", strict)
    objects = []
    raw_objects = _require(doc, "objects", "")
    if not isinstance(raw_objects, list):
        raise ParseError("expected a list", field="objects")
    for i, od in enumerate(raw_objects):
        where = f"objects[{i}]"
        _check_fields(od, _OBJECT_FIELDS, where, strict)
        oid = _require(od, "id", where)
        if not isinstance(oid, str) or not oid:
            raise ParseError("expected a non-empty string", field=f"{where}.id")
        mesh = load_mesh_obj(_resolve(base, _require(od, "mesh", where), f"{where}.mesh"))
        splats = load_splats_ply(_resolve(base, od["splats"], f"{where}.splats")) if od.get("splats") else None
        pose = pose_from_json(_require(od, "pose", where), f"{where}.pose", strict)
        params = _physical(od.get("physical"), f"{where}.physical", strict)
        try:
            objects.append(ObjectAsset.create(oid, mesh, splats, params, pose))
        except ValueError as exc:
            raise ParseError(str(exc), field=where) from exc
    _unique([o.id for o in objects], "objects")

    table = Plane.horizontal()
    if doc.get("table") is not None:
        td = doc["table"]
        _check_fields(td, ("normal", "d"), "table", strict)
        n = _vector(_require(td, "normal", "table"), 3, "table.normal")
        if not np.linalg.norm(n) > 0:
            raise ParseError("normal must be non-zero", field="table.normal")
        table = Plane(n, _number(_require(td, "d", "table"), "table.d"))
    workspace = None
    if doc.get("workspace") is not None:
        ws = doc["workspace"]
        if isinstance(ws, str):
            workspace = convex_hull(load_mesh_obj(_resolve(base, ws, "workspace")).vertices)
        else:
            _check_fields(ws, ("vertices",), "workspace", strict)
            pts = np.asarray(_require(ws, "vertices", "workspace"), dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ParseError("expected a list of 3-vectors", field="workspace.vertices")
            workspace = convex_hull(pts)
    background = GaussianSet.empty()
    if doc.get("background_splats"):
        background = load_splats_ply(_resolve(base, doc["background_splats"], "background_splats"))
    cameras = [camera_from_json(c, f"cameras[{i}]", strict) for i, c in enumerate(doc.get("cameras", []))]
    _unique([c.name for c in cameras], "cameras")
    gravity = _vector(doc.get("gravity", [0.0, 0.0, -9.81]), 3, "gravity")
    dt = _number(doc.get("dt", 1.0 / 240.0), "dt")
    if not dt > 0:
        raise ParseError("must be positive", field="dt")
    agent = GripperAgent()
    if doc.get("agent") is not None:
        ad = doc["agent"]
        _check_fields(ad, ("pose", "open"), "agent", strict)
        agent = GripperAgent(pose=pose_from_json(_require(ad, "pose", "agent"), "agent.pose", strict),
                             open=_flag(ad.get("open", True), "agent.open"))
    world = WorldState(objects, table, workspace, background, gravity, dt)
    return Scene(world, cameras, agent)


def save_scene(scene: Scene, path):
    """Write the scene document plus ``assets/<id>.obj|.ply`` next to it."""
    path = Path(path)
    base = path.parent
    assets = base / "assets"
    objects = []
    for o in scene.world.objects:
        mesh_rel = f"assets/{o.id}.obj"
        save_mesh_obj(o.mesh, base / mesh_rel)
        entry = {"id": o.id, "mesh": mesh_rel}
        if len(o.splats):
            splat_rel = f"assets/{o.id}.ply"
            save_splats_ply(o.splats, base / splat_rel)
            entry["splats"] = splat_rel
        p = o.params
        entry["pose"] = pose_to_json(o.pose)
        entry["physical"] = {"mass": None if p.fixed else p.mass, "friction": p.friction,
                             "restitution": p.restitution, "fixed": p.fixed}
        objects.append(entry)
    w = scene.world
    doc = {"objects": objects,
           "table": {"normal": [float(x) for x in w.table.normal], "d": w.table.offset}}
    if w.workspace is not None:
        doc["workspace"] = {"vertices": w.workspace.vertices.tolist()}
    if len(w.background_splats):
        save_splats_ply(w.background_splats, assets / "background.ply")
        doc["background_splats"] = "assets/background.ply"
    doc["cameras"] = [camera_to_json(c) for c in scene.cameras]
    doc["gravity"] = [float(x) for x in w.gravity]
    doc["dt"] = w.dt
    doc["agent"] = {"pose": pose_to_json(scene.agent.pose), "open": scene.agent.open}
    _dump(doc, path)


# ---------------------------------------------------------------------------
# demonstrations

_DEMO_FIELDS = ("task", "actions", "initial_poses", "goal_poses", "observations")
_ACTION_FIELDS = ("et", "er", "open", "collide")


def demo_from_json(doc, strict: bool = True) -> Demonstration:
    if not isinstance(doc, dict):
        raise ParseError("demo must be a JSON object")
    _check_fields(doc, _DEMO_FIELDS, "", strict)
    task = doc.get("task", "")
    if not isinstance(task, str):
        raise ParseError("expected a string", field="task")
    raw = _require(doc, "actions", "")
    if not isinstance(raw, list) or not raw:
        raise ParseError("expected a non-empty list", field="actions")
    actions = []
    for i, ad in enumerate(raw):
        where = f"actions[{i}]"
        _check_fields(ad, _ACTION_FIELDS, where, strict)
        actions.append(Action(_vector(_require(ad, "et", where), 3, f"{where}.et"),
                              _quat(_require(ad, "er", where), f"{where}.er"),
                              _flag(_require(ad, "open", where), f"{where}.open"),
                              _flag(ad.get("collide", False), f"{where}.collide")))

    def poses(key):
        d = doc.get(key, {})
        if not isinstance(d, dict):
            raise ParseError("expected an object", field=key)
        return {k: pose_from_json(v, f"{key}.{k}", strict) for k, v in d.items()}

    obs = doc.get("observations", [])
    if not isinstance(obs, list) or not all(isinstance(o, str) for o in obs):
        raise ParseError("expected a list of paths", field="observations")
    initial, goals = poses("initial_poses"), poses("goal_poses")
    missing = sorted(set(goals) - set(initial))
    if missing:
        raise ParseError(f"goal poses for objects without initial poses: {missing}", field="goal_poses")
    return Demonstration(task, actions, initial, goals, list(obs))


def demo_to_json(demo: Demonstration) -> dict:
    return {
        "task": demo.task,
        "actions": [{"et": [float(x) for x in a.et], "er": [float(x) for x in a.er], "open": a.open,
                     "collide": a.collide} for a in demo.actions],
        "initial_poses": {k: pose_to_json(v) for k, v in demo.initial_poses.items()},
        "goal_poses": {k: pose_to_json(v) for k, v in demo.goal_poses.items()},
        "observations": list(demo.observations),
    }


def load_demo(path, strict: bool = True) -> Demonstration:
    return demo_from_json(_load_json(path), strict)


def save_demo(demo: Demonstration, path):
    _dump(demo_to_json(demo), path)


def write_json(doc, path):
    _dump(doc, path)


def read_json(path):
    return _load_json(path)
