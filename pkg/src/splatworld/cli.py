"""Command-line interface: ``splatworld <command> ...``.

Exit codes: 0 success, 1 ``verify`` rejected, 2 usage error, 3 data error.

Frame directories hold ``<name>.png`` (RGB) and ``<name>_depth.png`` (16-bit mm);
mask directories hold ``<name>.png``; ``<name>`` is a camera name from the
cameras file.

Augmentation output layout::

    out/report.json
    out/<demo_id>/<spec_index>/demo.json
    out/<demo_id>/<spec_index>/<camera>_<action:03d>.png
    out/<demo_id>/<spec_index>/<camera>_<action:03d>_depth.png
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .agent import execute_demo
from .augment import (
    Demonstration,
    GridConfig,
    TransformSpec,
    augment_dataset,
    replay_error_report,
    summarize,
    verify,
    world_at,
)
from .core import RgbdImage, unproject_points
from .errors import DataError, InvalidStep, SplatWorldError
from .fit import FitConfig, TrainingView, optimize
from .mesh import clip_below_plane, marching_cubes, ransac_plane, tsdf_fuse
from .splat import GaussianSet, RenderOptions, init_from_rgbd, render_downsampled

log = logging.getLogger("splatworld")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    """Arguments parsed but describe an invalid request."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _vec3(text):
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated numbers, got {text!r}")
    return vals


def _default_jobs():
    env = os.environ.get("DREMA_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# frames


def load_frames(frames_dir, masks_dir, cameras_file):
    """``[(name, RgbdImage, mask, Camera)]`` for every camera with a frame on disk."""
    frames_dir, masks_dir = Path(frames_dir), Path(masks_dir)
    for d in (frames_dir, masks_dir):
        if not d.is_dir():
            raise DataError(f"{d} is not a directory")
    out = []
    for cam in io.load_cameras(cameras_file):
        rgb_path = frames_dir / f"{cam.name}.png"
        if not rgb_path.exists():
            continue
        depth_path = frames_dir / f"{cam.name}_depth.png"
        mask_path = masks_dir / f"{cam.name}.png"
        for p in (depth_path, mask_path):
            if not p.exists():
                raise DataError(f"missing {p}")
        image = RgbdImage(io.load_rgb_png(rgb_path), io.load_depth_png(depth_path))
        mask = io.load_mask_png(mask_path)
        if mask.shape != image.depth.shape or (cam.intrinsics.height, cam.intrinsics.width) != mask.shape:
            raise DataError(f"camera {cam.name}: image, mask and intrinsics sizes disagree")
        out.append((cam.name, image, mask, cam))
    if not out:
        raise DataError(f"no frames in {frames_dir} match the cameras in {cameras_file}")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    try:
        cfg = FitConfig(iterations=args.iters, lambda_depth=args.lambda_depth, lambda_normal=args.lambda_n,
                        seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    frames = load_frames(args.frames, args.masks, args.cameras)
    views = [TrainingView(img, mask, cam.intrinsics, cam.pose) for _, img, mask, cam in frames]
    init = init_from_rgbd([(img, mask, cam.intrinsics, cam.pose) for _, img, mask, cam in frames],
                          stride=args.stride)
    result = optimize(views, init, cfg)
    io.save_splats_ply(result.splats, args.out)
    print(f"{len(result.splats)} splats, loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    return EXIT_OK


def cmd_mesh(args):
    if not (args.voxel > 0 and args.trunc > 0):
        raise UsageError("--voxel and --trunc must be positive")
    frames = load_frames(args.frames, args.masks, args.cameras)
    grid = tsdf_fuse([(img, mask, cam.intrinsics, cam.pose) for _, img, mask, cam in frames],
                     voxel_size=args.voxel, truncation=args.trunc)
    mesh = marching_cubes(grid)
    if args.table_clip:
        # the table is the dominant plane among valid pixels outside the object masks
        pts = []
        for _, img, mask, cam in frames:
            v, u = np.nonzero(img.valid & ~mask)
            pts.append(unproject_points(u, v, img.depth[v, u], cam.intrinsics, cam.pose))
        pts = np.concatenate(pts) if pts else np.zeros((0, 3))
        if len(pts) < 3:
            raise DataError("--table-clip needs valid depth outside the masks")
        plane, _ = ransac_plane(pts, inlier_threshold=args.voxel, seed=args.seed)
        mesh = clip_below_plane(mesh, plane)
    io.save_mesh_obj(mesh, args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return EXIT_OK


def cmd_render(args):
    scene = io.load_scene(args.scene)
    try:
        cam = scene.camera(args.camera)
    except KeyError:
        raise DataError(f"scene has no camera named {args.camera!r}") from None
    try:
        opts = RenderOptions(supersample_factor=args.supersample)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.width < 1 or args.height < 1:
        raise UsageError("--width and --height must be >= 1")
    parts = [scene.world.background_splats] + [o.world_splats() for o in scene.world.objects if len(o.splats)]
    image = render_downsampled(GaussianSet.concatenate(parts), cam.intrinsics, cam.pose,
                               args.width, args.height, opts, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rgb, depth = io.save_rgbd(image, out / cam.name)
    print(rgb)
    print(depth)
    return EXIT_OK


def _save_observations(observations, directory: Path):
    names = []
    for ob in observations:
        stem = f"{ob.camera}_{ob.action_index:03d}"
        io.save_rgbd(ob.image, directory / stem)
        names += [f"{stem}.png", f"{stem}_depth.png"]
    return names


def cmd_replay(args):
    scene = io.load_scene(args.scene)
    demo = io.load_demo(args.demo)
    report = replay_error_report(demo, scene.world, scene.agent)
    doc = {
        "errors": report.errors,
        "mean_error": report.mean,
        "max_error": max(report.errors.values()) if report.errors else 0.0,
        "goal_poses": {k: io.pose_to_json(v) for k, v in sorted(report.goals.items())},
    }
    out = Path(args.out)
    if args.render:
        run = execute_demo(world_at(scene.world, demo.initial_poses), scene.agent, demo.actions,
                           scene.cameras, render=True)
        doc["observations"] = _save_observations(run.observations, out.parent)
    io.write_json(doc, out)
    print(f"mean error {report.mean:.3e} m over {len(report.errors)} objects")
    return EXIT_OK


def cmd_verify(args):
    if not args.tau > 0:
        raise UsageError("--tau must be positive")
    scene = io.load_scene(args.scene)
    demo = io.load_demo(args.demo)
    report = replay_error_report(demo, scene.world, scene.agent)
    check = verify(demo.goal_positions(), report.goals, TransformSpec.replay(), args.tau)
    for k, e in sorted(check.errors.items()):
        print(f"{k}: {e:.3e} m")
    print("accepted" if check.accepted else "rejected")
    return EXIT_OK if check.accepted else EXIT_REJECTED


def _spec_json(spec: TransformSpec) -> dict:
    return {"kind": spec.kind.value, "angle_deg": spec.angle_deg,
            "translation": [float(x) for x in spec.translation],
            "point": None if spec.point is None else [float(x) for x in spec.point]}


def cmd_augment(args):
    try:
        cfg = GridConfig(xy_offsets=args.xy, env_rot_center=args.rot_center, env_rot_step=args.env_rot_step,
                         traj_rot_step=args.traj_rot_step, tau=args.tau)
    except (ValueError, InvalidStep) as exc:
        raise UsageError(str(exc)) from None
    scene = io.load_scene(args.scene)
    demo_dir = Path(args.demos)
    if not demo_dir.is_dir():
        raise DataError(f"{demo_dir} is not a directory")
    paths = sorted(demo_dir.glob("*.json"))
    if not paths:
        raise DataError(f"no demo files in {demo_dir}")
    demos = [io.load_demo(p) for p in paths]
    render = not args.no_render
    report = augment_dataset(scene.world, scene.agent, demos, cfg, render=render, cameras=scene.cameras,
                             jobs=args.jobs)
    out = Path(args.out)
    entries = []
    for d, s, result in report.results:
        demo_id = paths[d].stem
        entry = {"demo": demo_id, "spec_index": s, "spec": _spec_json(result.spec), "accepted": result.accepted,
                 "errors": result.errors, "failure": result.failure}
        if result.accepted and result.demo is not None:
            target = out / demo_id / f"{s:02d}"
            names = _save_observations(result.observations, target)
            demo = Demonstration(result.demo.task, result.demo.actions, result.demo.initial_poses,
                                 result.demo.goal_poses, names)
            io.save_demo(demo, target / "demo.json")
            entry["path"] = f"{demo_id}/{s:02d}"
        entries.append(entry)
    io.write_json({"seed": args.seed, "stats": report.stats, "results": entries}, out / "report.json")
    print(f"{report.stats['accepted']}/{report.stats['generated']} accepted")
    return EXIT_OK


def cmd_stats(args):
    path = Path(args.results) / "report.json"
    if not path.exists():
        raise DataError(f"missing {path}")
    doc = io.read_json(path)
    try:
        results = doc["results"]
        stats = summarize(len(results), sum(1 for r in results if r["accepted"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed report") from exc
    print(json.dumps(stats))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatworld", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def frames_args(sp):
        sp.add_argument("--frames", required=True)
        sp.add_argument("--masks", required=True)
        sp.add_argument("--cameras", required=True)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("fit", help="fit splats to masked RGB-D frames")
    frames_args(sp)
    sp.add_argument("--iters", type=int, default=7000)
    sp.add_argument("--lambda-depth", type=float, default=FitConfig.lambda_depth)
    sp.add_argument("--lambda-n", type=float, default=FitConfig.lambda_normal)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stride", type=int, default=2, help="pixel stride of the depth initialization")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("mesh", help="TSDF-fuse masked frames and extract a mesh")
    frames_args(sp)
    sp.add_argument("--voxel", type=float, default=0.005)
    sp.add_argument("--trunc", type=float, default=0.02)
    sp.add_argument("--table-clip", action="store_true", help="flatten geometry below the fitted table plane")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_mesh)

    sp = sub.add_parser("render", help="render a scene camera to PNGs")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--supersample", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; rendering is not random")
    sp.add_argument("--jobs", type=int, default=_default_jobs())
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("replay", help="replay a demo and report goal errors")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--demo", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--render", action="store_true")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("augment", help="generate verified transformed demos")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--demos", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--xy", type=_floats, default=(0.0, 0.15, -0.15))
    sp.add_argument("--env-rot-step", type=float, default=30.0)
    sp.add_argument("--traj-rot-step", type=float, default=20.0)
    sp.add_argument("--rot-center", type=_vec3, default=(0.30, 0.0, 0.0))
    sp.add_argument("--tau", type=float, default=0.015)
    sp.add_argument("--jobs", type=int, default=_default_jobs())
    sp.add_argument("--seed", type=int, default=0, help="recorded in the report; the grid is deterministic")
    sp.add_argument("--no-render", action="store_true")
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("verify", help="replay a demo; exit 0 if accepted, 1 if rejected")
    sp.add_argument("--demo", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--tau", type=float, default=0.015)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("stats", help="summarize an augmentation report")
    sp.add_argument("--results", required=True)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SplatWorldError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
