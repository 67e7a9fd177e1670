"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluation import SCENES, camera_path, default_intrinsics, evaluate, make_scene, render_scene, sample_mesh
from .geometry import PointCloud
from .mesh import TriangleMesh
from .pipeline import PipelineError, load_config, run

log = logging.getLogger("octomesh")


def _cloud(path: str, density: float, seed: int) -> PointCloud:
    m = io.read_ply(path)
    if m.n_faces:
        return sample_mesh(m, density, seed)
    if m.vertex_normals is None:
        raise ValueError(f"{path}: point cloud without normals")
    return PointCloud(m.vertices, m.vertex_normals)


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    res = run(cfg)
    if res.metrics is not None:
        print(res.metrics.to_json())
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    recon = _cloud(args.recon, args.density, args.seed)
    gt = _cloud(args.gt, args.density, args.seed + 1)
    rep = evaluate(recon, gt, args.tau, density=args.density)
    print(rep.to_json())
    if args.out:
        rep.save(args.out)
    return 0


def cmd_synth(args) -> int:
    """Write a synthetic RGB-D sequence in the rgbd_dir layout."""
    out = Path(args.out)
    for sub in ("color", "depth", "pose"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scene = make_scene(args.scene)
    intr = default_intrinsics(args.width, args.height)
    io.write_intrinsics(out / "intrinsics.txt", intr)
    for i, pose in enumerate(camera_path(args.scene, args.frames)):
        fr = render_scene(scene, pose, intr, index=i)
        io.write_color_png(out / "color" / f"{i:06d}.png", fr.color)
        io.write_depth_png(out / "depth" / f"{i:06d}.png", fr.depth, intr.depth_scale)
        io.write_pose(out / "pose" / f"{i:06d}.txt", pose)
    gt = scene.sample(1.0, seed=args.seed)
    io.write_ply(_as_mesh(gt), out / "gt.ply")
    log.info("wrote %d frames of %s to %s", args.frames, args.scene, out)
    return 0


def _as_mesh(cloud: PointCloud) -> TriangleMesh:
    return TriangleMesh(cloud.positions, np.zeros((0, 3), dtype=np.int64), vertex_normals=cloud.normals)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octomesh", description="Incremental mesh reconstruction")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="run the streaming pipeline")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare a reconstruction with ground truth")
    e.add_argument("--recon", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--density", type=float, default=1.0, help="mesh sampling density, points per cm^2")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write the report to this JSON file")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="render a synthetic RGB-D sequence")
    s.add_argument("--scene", required=True, choices=SCENES)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PipelineError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
