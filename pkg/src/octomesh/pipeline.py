"""Streaming reconstruction driver: ingest, insert, mesh, refine, fuse."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .evaluation import (MetricsReport, evaluate, make_scene, camera_path, default_intrinsics,
                         render_scene, sample_mesh, psnr)
from .fusion import GlobalMesh, lock_shared_boundary, merge_partial, write_manifest
from .geometry import Frame, PointCloud, Pose, backproject_depth, estimate_normals, transform_cloud
from .mesh import TriangleMesh
from .meshing import extract_partial_mesh
from .octree import HybridVoxelOctree
from .refine_point import LossWeights, OptState, TRACE_FIELDS, refine, write_trace_csv
from .shading import ShadingModel, ShadingOptimizers, rasterize, refine_shading, shade

log = logging.getLogger(__name__)

INPUT_MODES = ("rgbd_dir", "ply_dir", "synthetic")


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input: str = "synthetic"
    input_path: str = ""
    scene: str = "room"
    frames: int = 50  # synthetic frame count
    width: int = 160
    height: int = 120
    intrinsics: str = ""
    leaf_edge: float = 0.05
    t_min: float = 0.02
    t_cur: float = 0.01
    l_max: int = 3
    max_depth: int = 16
    origin: tuple | None = None
    keep_ratio: float = 1.0
    normal_k: int = 16
    max_range: float = 10.0
    iterations: int = 300
    lambda_lap: float = 50.0
    lambda_normal: float = 1.0
    lambda_edge: float = 1.0
    lr_vertices: float = 1e-4
    lr_albedo: float = 1e-2
    lr_sh: float = 1e-3
    point_refine: bool = True
    shading: bool = True
    shading_warmup: int = 0
    shading_frames: int = 8
    cadence: int = 200
    output: str = "out"
    seed: int = 0
    gt: str = ""  # "scene" for the synthetic scene, or a PLY path
    eval_density: float = 1.0
    tau: float = 0.05

    def __post_init__(self):
        if self.input not in INPUT_MODES:
            raise ValueError(f"input must be one of {INPUT_MODES}")
        for name in ("leaf_edge", "t_min", "keep_ratio", "max_range", "eval_density", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.keep_ratio > 1:
            raise ValueError("keep_ratio must be in (0, 1]")
        for name in ("cadence", "frames", "l_max", "max_depth", "width", "height", "shading_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0 or self.shading_warmup < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.t_cur < 0:
            raise ValueError("t_cur must be nonnegative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_lap, self.lambda_normal, self.lambda_edge)


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ == "tuple":
        vals = tuple(float(x) for x in raw.replace(",", " ").split())
        if len(vals) != 3:
            raise ValueError("expected three numbers")
        return vals
    return raw


_TYPES = {"origin": "tuple"}


def load_config(path) -> PipelineConfig:
    """Flat ``key = value`` file; '#' starts a comment; unknown keys fail."""
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    values = {}
    base = Path(path).resolve().parent
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise ValueError(f"{path}:{n}: unknown key {k!r}")
        typ = _TYPES.get(k) or {"int": int, "float": float, "bool": bool}.get(str(known[k].type), str)
        try:
            values[k] = _parse_value(v, typ)
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: bad value for {k}: {exc}") from None
    for k in ("input_path", "intrinsics", "output"):
        if values.get(k) and not Path(values[k]).is_absolute():
            values[k] = str(base / values[k])
    if values.get("gt") and values["gt"] != "scene" and not Path(values["gt"]).is_absolute():
        values["gt"] = str(base / values["gt"])
    return PipelineConfig(**values)


# -- input streams ---------------------------------------------------------------

@dataclass
class InputFrame:
    index: int
    cloud: PointCloud  # world frame, no normals yet
    viewpoint: np.ndarray
    image: Frame | None = None


def _synthetic_frames(cfg: PipelineConfig):
    scene = make_scene(cfg.scene)
    intr = default_intrinsics(cfg.width, cfg.height)
    for i, pose in enumerate(camera_path(cfg.scene, cfg.frames)):
        fr = render_scene(scene, pose, intr, index=i)
        yield InputFrame(i, backproject_depth(fr, cfg.max_range), pose.translation, fr)


def _rgbd_frames(cfg: PipelineConfig):
    root = Path(cfg.input_path)
    intr_path = Path(cfg.intrinsics) if cfg.intrinsics else root / "intrinsics.txt"
    intr = io.read_intrinsics(intr_path)
    for i, cpath in enumerate(sorted((root / "color").glob("*.png"))):
        stem = cpath.stem
        try:
            color = io.read_color_png(cpath)
            depth = io.read_depth_png(root / "depth" / f"{stem}.png", intr.depth_scale)
            pose = io.read_pose(root / "pose" / f"{stem}.txt")
            fr = Frame(color, depth, pose, intr, i)
        except (OSError, ValueError) as exc:
            log.warning("skipping frame %s: %s", stem, exc)
            continue
        yield InputFrame(i, backproject_depth(fr, cfg.max_range), pose.translation, fr)


def _ply_frames(cfg: PipelineConfig):
    root = Path(cfg.input_path)
    for i, ppath in enumerate(sorted(root.glob("*.ply"))):
        try:
            cloud = io.read_ply_cloud(ppath)
            pose_path = ppath.with_suffix(".txt")
            pose = io.read_pose(pose_path) if pose_path.exists() else Pose()
        except (OSError, ValueError) as exc:
            log.warning("skipping frame %s: %s", ppath.name, exc)
            continue
        cloud = transform_cloud(PointCloud(cloud.positions, colors=cloud.colors), pose)
        yield InputFrame(i, cloud, pose.translation, None)


def frame_stream(cfg: PipelineConfig):
    if cfg.input == "synthetic":
        return _synthetic_frames(cfg)
    if not cfg.input_path or not Path(cfg.input_path).is_dir():
        raise PipelineError(f"input directory {cfg.input_path!r} does not exist")
    return _rgbd_frames(cfg) if cfg.input == "rgbd_dir" else _ply_frames(cfg)


# -- records -----------------------------------------------------------------------

@dataclass
class PartialRecord:
    index: int
    first_frame: int
    last_frame: int
    dirty_codes: list[int] = field(default_factory=list)
    n_vertices: int = 0
    n_faces: int = 0
    n_locked: int = 0
    loss_before: float | None = None
    loss_after: float | None = None
    psnr_db: float | None = None
    insert_ms: float = 0.0
    mesh_ms: float = 0.0
    refine_ms: float = 0.0
    fuse_ms: float = 0.0
    n_frames: int = 0
    n_leaves: int = 0
    n_points: int = 0

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["dirty_codes"] = [f"{c:x}" for c in self.dirty_codes]
        return d


POINT_RECORD_BYTES = 10 * 8  # position, normal, colour, curvature as float64


def report(records: list[PartialRecord]) -> dict:
    if not records:
        raise ValueError("no partial records")
    insert = sum(r.insert_ms for r in records)
    frames = sum(r.n_frames for r in records)
    total = sum(r.insert_ms + r.mesh_ms + r.refine_ms + r.fuse_ms for r in records)
    return {
        "total_runtime_s": total / 1000.0,
        "insertion_fps": frames / (insert / 1000.0) if insert > 0 else float("inf"),
        "refine_s_per_partial": [r.refine_ms / 1000.0 for r in records],
        "peak_leaf_count": max(r.n_leaves for r in records),
        "stored_points": records[-1].n_points,
        "approx_point_memory_bytes": records[-1].n_points * POINT_RECORD_BYTES,
        "partials": len(records),
        "frames": frames,
    }


@dataclass
class RunResult:
    global_mesh: TriangleMesh
    records: list[PartialRecord]
    metrics: MetricsReport | None
    summary: dict
    tree: HybridVoxelOctree


def _pick_frames(frames: list[Frame], cap: int) -> list[Frame]:
    if len(frames) <= cap:
        return frames
    idx = np.unique(np.round(np.linspace(0, len(frames) - 1, cap)).astype(int))
    return [frames[i] for i in idx]


def _refine_partial(cfg: PipelineConfig, partial: TriangleMesh, X: PointCloud, images: list[Frame],
                    rec: PartialRecord):
    """Point refinement, joint with shading when images are available."""
    if partial.n_faces == 0 or len(X) == 0 or cfg.iterations == 0:
        return partial, []
    use_shading = cfg.shading and images
    if use_shading:
        covered = sum(int(rasterize(partial, f.pose, f.intrinsics).covered.sum()) for f in images)
        use_shading = covered > 0
    if use_shading:
        opt = ShadingOptimizers(OptState(cfg.lr_vertices), OptState(cfg.lr_albedo), OptState(cfg.lr_sh))
        model = ShadingModel.neutral(partial.n_vertices)
        res = refine_shading(partial, images, model, opt, cfg.iterations, warmup=cfg.shading_warmup,
                             X=X if cfg.point_refine else None, weights=cfg.weights, seed=cfg.seed + rec.index,
                             move_vertices=True)
        mesh = res.mesh
        shaded = [shade(rasterize(mesh, f.pose, f.intrinsics), mesh, res.model) for f in images]
        masks = [rasterize(mesh, f.pose, f.intrinsics).covered for f in images]
        m = np.concatenate([mk.ravel() for mk in masks])
        a = np.concatenate([s.reshape(-1, 3) for s in shaded])[m]
        b = np.concatenate([f.color.reshape(-1, 3) for f in images])[m]
        rec.psnr_db = psnr(a, b) if len(a) else None
    elif cfg.point_refine:
        res = refine(partial, X, cfg.weights, OptState(cfg.lr_vertices), cfg.iterations,
                     seed=cfg.seed + rec.index)
        mesh = res.mesh
    else:
        return partial, []
    if res.error:
        log.warning("partial %d: %s", rec.index, res.error)
    mesh.vertex_colors = partial.vertex_colors
    if res.trace:
        rec.loss_before, rec.loss_after = res.trace[0].total, res.trace[-1].total
    return mesh, res.trace


def _ground_truth(cfg: PipelineConfig) -> PointCloud | None:
    if not cfg.gt:
        return None
    if cfg.gt == "scene":
        if cfg.input != "synthetic":
            raise PipelineError("gt = scene needs synthetic input")
        return make_scene(cfg.scene).sample(cfg.eval_density, cfg.seed)
    m = io.read_ply(cfg.gt)
    if m.n_faces:
        return sample_mesh(m, cfg.eval_density, cfg.seed)
    if m.vertex_normals is None:
        raise PipelineError("ground-truth point cloud needs normals")
    return PointCloud(m.vertices, m.vertex_normals)


def run(cfg: PipelineConfig) -> RunResult:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    trace_path.write_text(",".join(("partial",) + TRACE_FIELDS) + "\n")
    for old in out.glob("partial_*.ply"):
        old.unlink()

    tree: HybridVoxelOctree | None = None
    gmesh = GlobalMesh()
    records: list[PartialRecord] = []
    window: list[Frame] = []
    rec: PartialRecord | None = None
    n_read = 0

    def flush(last_frame: int):
        nonlocal gmesh, rec
        t0 = time.perf_counter()
        rec.dirty_codes = tree.dirty_codes() if tree is not None else []
        partial = extract_partial_mesh(tree) if tree is not None else TriangleMesh.empty()
        partial = lock_shared_boundary(partial, gmesh) if partial.n_vertices else partial
        X = tree.collect_supervision(rec.dirty_codes) if tree is not None else PointCloud(np.zeros((0, 3)))
        t1 = time.perf_counter()
        refined, trace = _refine_partial(cfg, partial, X, _pick_frames(window, cfg.shading_frames), rec)
        t2 = time.perf_counter()
        if refined.n_vertices:
            gmesh = merge_partial(gmesh, refined)
        io.write_ply(refined, out / f"partial_{rec.index:03d}.ply")
        io.write_ply(gmesh.to_mesh(), out / "global.ply")
        write_trace_csv(trace_path, trace, partial=rec.index, append=True)
        t3 = time.perf_counter()
        rec.last_frame = last_frame
        rec.n_vertices, rec.n_faces = refined.n_vertices, refined.n_faces
        rec.n_locked = int(refined.locked.sum()) if refined.n_vertices else 0
        rec.mesh_ms, rec.refine_ms, rec.fuse_ms = (1000 * (t1 - t0), 1000 * (t2 - t1), 1000 * (t3 - t2))
        rec.n_leaves = len(tree.leaves) if tree is not None else 0
        rec.n_points = tree.n_points if tree is not None else 0
        records.append(rec)
        log.info("partial %d: frames %d-%d, %d faces, %d locked", rec.index, rec.first_frame,
                 rec.last_frame, rec.n_faces, rec.n_locked)

    last = -1
    for k, fr in enumerate(frame_stream(cfg)):
        t0 = time.perf_counter()
        if rec is None:
            rec = PartialRecord(len(records), fr.index, fr.index)
        if tree is None:
            if cfg.origin is not None:
                tree = HybridVoxelOctree(cfg.origin, cfg.leaf_edge, cfg.max_depth, cfg.t_min, cfg.t_cur, cfg.l_max)
            else:
                tree = HybridVoxelOctree.centered(fr.viewpoint, cfg.leaf_edge, cfg.max_depth,
                                                  t_min=cfg.t_min, t_cur=cfg.t_cur, l_max=cfg.l_max)
        n_read += 1
        if len(fr.cloud) >= cfg.normal_k:
            est = estimate_normals(fr.cloud, cfg.normal_k, fr.viewpoint)
            st = tree.insert_points(est.cloud, cfg.keep_ratio)
            log.info("frame %d: %d points, %d stored, %d new leaves", fr.index, st.points_offered,
                     st.points_stored, st.new_leaves)
        else:
            log.warning("frame %d: too few valid points", fr.index)
        if fr.image is not None:
            window.append(fr.image)
        rec.insert_ms += 1000 * (time.perf_counter() - t0)
        rec.n_frames += 1
        last = fr.index
        if n_read % cfg.cadence == 0:
            flush(last)
            rec, window = None, []
    if n_read == 0:
        raise PipelineError("no input frames could be read")
    if rec is not None:
        flush(last)

    final = gmesh.to_mesh()
    metrics = None
    gt = _ground_truth(cfg)
    if gt is not None and final.n_faces:
        recon = sample_mesh(final, cfg.eval_density, cfg.seed)
        metrics = evaluate(recon, gt, cfg.tau, density=cfg.eval_density, seed=cfg.seed)
        ps = [r.psnr_db for r in records if r.psnr_db is not None]
        metrics.psnr_db = float(np.mean(ps)) if ps else None
        metrics.save(out / "metrics.json")
    summary = report(records)
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    write_manifest(out / "manifest.json", [r.to_json() for r in records],
                   {"summary": summary, "config": cfg_dict})
    return RunResult(final, records, metrics, summary, tree)


def expected_partials(n_frames: int, cadence: int) -> int:
    return math.ceil(n_frames / cadence)
