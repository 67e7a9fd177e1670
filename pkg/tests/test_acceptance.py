"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as each test finishes (visible with ``-s``) and again in
the terminal summary of any pytest run that includes this module.
"""
from __future__ import annotations

import gc
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from octomesh import morton
from octomesh.evaluation import (BoxRoom, SyntheticScene, accuracy, box_room_mesh, camera_path,
                                 default_intrinsics, f_score, make_scene, normal_consistency, psnr,
                                 render_scene, sample_mesh)
from octomesh.fusion import GlobalMesh, lock_shared_boundary, merge_partial
from octomesh.geometry import CameraIntrinsics, Frame, PointCloud, Pose, estimate_normals
from octomesh.mesh import TriangleMesh, edge_face_counts
from octomesh.meshing import extract_partial_mesh
from octomesh.octree import HybridVoxelOctree
from octomesh.pipeline import PipelineConfig, run
from octomesh.refine_point import (chamfer_loss_grad, edge_loss_grad, laplacian_loss_grad,
                                   normal_consistency_loss_grad, refine, sample_surface)
from octomesh.shading import ShadingModel, rasterize, refine_shading, shade, shading_loss_grad

from helpers import central_diff, rel_err

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print("\n" + line)


# -- 1. Morton codes -------------------------------------------------------------

def interleave_oracle(x: int, y: int, z: int, depth: int) -> int:
    """Bit-by-bit interleave, independent of the magic-number spreading."""
    c = 0
    for b in range(depth):
        c |= ((x >> b) & 1) << (3 * b) | ((y >> b) & 1) << (3 * b + 1) | ((z >> b) & 1) << (3 * b + 2)
    return c


def test_criterion_1_morton():
    t0 = time.perf_counter()
    grid = [(x, y, z) for z in range(8) for y in range(8) for x in range(8)]
    codes = {}
    for p in grid:
        c = morton.morton_encode(*p, depth=3)
        assert c == interleave_oracle(*p, 3)
        assert morton.morton_decode(c, depth=3) == p
        codes[p] = c
    assert sorted(codes.values()) == list(range(512))

    rng = np.random.default_rng(20)
    ijk = rng.integers(0, 1 << 20, size=(100_000, 3))
    enc = morton.encode_array(ijk)
    np.testing.assert_array_equal(morton.decode_array(enc), ijk)
    for p, c in zip(ijk[:2000].tolist(), enc[:2000].tolist()):
        assert c == interleave_oracle(*p, 20) == morton.morton_encode(*p, depth=20)

    mismatches = 0
    for (x, y, z), c in codes.items():
        brute = {codes[(x + dx, y + dy, z + dz)]
                 for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                 if (dx, dy, dz) != (0, 0, 0) and (x + dx, y + dy, z + dz) in codes}
        got = morton.neighbor_codes(c, depth=3)
        mismatches += len(got) != len(set(got)) or set(got) != brute
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 5.0
    record(1, ok, f"512 + 100000 roundtrips, {mismatches} neighbour mismatches, {dt:.2f} s")
    assert ok


# -- 2. gradients against central differences ------------------------------------------

def sphere_hull_mesh(rng, n=20, jitter=0.15):
    """Closed 20-vertex mesh: hull of points on a sphere, radii then perturbed."""
    from scipy.spatial import ConvexHull

    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    f = ConvexHull(d).simplices.copy()
    for i, tri in enumerate(f):
        if np.cross(d[tri[1]] - d[tri[0]], d[tri[2]] - d[tri[0]]) @ d[tri[0]] < 0:
            f[i] = tri[[0, 2, 1]]
    v = d * (1 + jitter * rng.uniform(-1, 1, (n, 1)))
    return TriangleMesh(v, f)


SH_INTR = CameraIntrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst = {}

    def check(name, analytic, numeric):
        worst[name] = max(worst.get(name, 0.0), rel_err(analytic, numeric))

    for trial in range(10):
        rng = np.random.default_rng(9000 + trial)
        m = sphere_hull_mesh(rng)
        assert m.n_vertices == 20 and len(np.unique(m.faces)) == 20

        def with_v(v):
            return TriangleMesh(v.reshape(-1, 3), m.faces)

        X = rng.normal(size=(60, 3))
        s = sample_surface(m, 60, seed=trial)
        check("chamfer", chamfer_loss_grad(s, X, m)[1],
              central_diff(lambda v: chamfer_loss_grad(s, X, with_v(v))[0], m.vertices))
        check("laplacian", laplacian_loss_grad(m, 50.0)[1],
              central_diff(lambda v: laplacian_loss_grad(with_v(v), 50.0)[0], m.vertices))
        check("normal", normal_consistency_loss_grad(m, 1.0)[1],
              central_diff(lambda v: normal_consistency_loss_grad(with_v(v), 1.0)[0], m.vertices))
        check("edge", edge_loss_grad(m, 1.0)[1],
              central_diff(lambda v: edge_loss_grad(with_v(v), 1.0)[0], m.vertices))

        # shading: the mesh 4 m in front of the camera, buffers held fixed
        sm = TriangleMesh(m.vertices + [0.0, 0.0, 4.0], m.faces)
        sm.compute_vertex_normals()
        target = rng.uniform(0.0, 0.8, (SH_INTR.height, SH_INTR.width, 3))
        frames = [Frame(target, np.zeros(target.shape[:2]), Pose(), SH_INTR)]
        model = ShadingModel(rng.uniform(-0.3, 0.3, 4) + [0.6, 0, 0, 0],
                             rng.uniform(0.2, 0.7, (sm.n_vertices, 3)))
        bufs = [rasterize(sm, Pose(), SH_INTR)]
        g = shading_loss_grad(sm, model, frames, bufs)
        check("shading albedo", g.albedo, central_diff(
            lambda a: shading_loss_grad(sm, ShadingModel(model.sh, a), frames, bufs).loss, model.albedo))
        check("shading sh", g.sh, central_diff(
            lambda l: shading_loss_grad(sm, ShadingModel(l, model.albedo), frames, bufs).loss, model.sh))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and dt < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"worst relative error: {detail}; {dt:.1f} s")
    assert ok


# -- 3 and 4. sphere fixture -------------------------------------------------------------

EVAL_SEEDS = range(8)


class SphereRun:
    def __init__(self, leaf: float, l_max: int, cloud: PointCloud):
        t0 = time.perf_counter()
        tree = HybridVoxelOctree.centered(np.zeros(3), leaf_edge=leaf, l_max=l_max, t_min=0.02, t_cur=0.01)
        tree.insert_points(cloud)
        self.n_leaves = len(tree.leaves)
        self.raw = extract_partial_mesh(tree)
        X = tree.collect_supervision(list(tree.leaves))
        self.refined = refine(self.raw, X, iters=300).mesh
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="module")
def sphere():
    scene = make_scene("sphere")
    inp = scene.sample(1.0, seed=1)
    # outward normals: orient towards a viewpoint outside the sphere
    cloud = estimate_normals(PointCloud(inp.positions), 16, viewpoint=2 * inp.positions).cloud
    gts = {s: scene.sample(1.0, seed=100 + s) for s in EVAL_SEEDS}
    return {"cloud": cloud, "gts": gts, "runs": {}}


def sphere_run(sphere, leaf, l_max) -> SphereRun:
    key = (leaf, l_max)
    if key not in sphere["runs"]:
        sphere["runs"][key] = SphereRun(leaf, l_max, sphere["cloud"])
    return sphere["runs"][key]


def mean_accuracy(mesh, gts) -> float:
    return float(np.mean([accuracy(sample_mesh(mesh, 1.0, s), gt) for s, gt in gts.items()]))


@pytest.mark.slow
def test_criterion_3_sphere(sphere):
    t0 = time.perf_counter()
    r = sphere_run(sphere, 0.05, 3)
    gt = sphere["gts"][0]
    raw_acc = accuracy(sample_mesh(r.raw, 1.0, 0), gt)
    rec = sample_mesh(r.refined, 1.0, 0)
    acc, f, nc = accuracy(rec, gt), f_score(rec, gt, 0.05), normal_consistency(rec, gt)
    dt = time.perf_counter() - t0
    ok = raw_acc <= 1.5 and acc <= 0.6 and f >= 0.95 and nc >= 0.95 and dt < 180
    record(3, ok, f"raw acc {raw_acc:.4f} cm, refined acc {acc:.4f} cm, F@5cm {f:.4f}, NC {nc:.4f}, "
                  f"{dt:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_4_resolution_trend(sphere):
    # The trend is read on the extracted mesh.  After refinement the optimizer's
    # step size bounds the residual error, which hides the 0.05 / 0.02 difference
    # in evaluation noise; those numbers are reported alongside.
    cfgs = [(0.1, 3), (0.05, 3), (0.02, 3), (0.02, 1)]
    runs = {c: sphere_run(sphere, *c) for c in cfgs}
    t0 = time.perf_counter()
    raw = {c: mean_accuracy(r.raw, sphere["gts"]) for c, r in runs.items()}
    ref = {c: mean_accuracy(r.refined, sphere["gts"]) for c, r in runs.items()}
    leaves = [runs[c].n_leaves for c in cfgs[:3]]
    # reconstruction time of every configuration, including one shared with criterion 3
    dt = time.perf_counter() - t0 + sum(r.seconds for r in runs.values())
    ok = (raw[(0.1, 3)] > raw[(0.05, 3)] > raw[(0.02, 3)] and raw[(0.02, 3)] <= raw[(0.02, 1)]
          and leaves[0] < leaves[1] < leaves[2] and dt < 600)
    fmt = " / ".join
    record(4, ok, "raw acc 0.1/0.05/0.02/0.02-L1 "
                  + fmt(f"{raw[c]:.4f}" for c in cfgs)
                  + " cm; refined " + fmt(f"{ref[c]:.4f}" for c in cfgs)
                  + f" cm; leaves {fmt(str(n) for n in leaves)}; {dt:.0f} s")
    assert ok


# -- 5. ablation on the box room ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_ablation(tmp_path):
    t0 = time.perf_counter()
    gt = make_scene("room").sample(1.0, seed=7)
    accs = {}
    for name, kw in [("raw", dict(point_refine=False, shading=False)),
                     ("point", dict(shading=False)), ("joint", dict())]:
        cfg = PipelineConfig(scene="room", frames=20, cadence=20, iterations=300,
                             output=str(tmp_path / name), **kw)
        mesh = run(cfg).global_mesh
        accs[name] = float(np.mean([accuracy(sample_mesh(mesh, 1.0, s), gt) for s in range(3)]))
    dt = time.perf_counter() - t0
    ok = accs["point"] < accs["raw"] and accs["joint"] <= accs["point"] + 0.05 and dt < 300
    record(5, ok, f"acc raw {accs['raw']:.4f}, point {accs['point']:.4f}, joint {accs['joint']:.4f} cm, "
                  f"{dt:.0f} s")
    assert ok


# -- 6. seams between partial meshes ---------------------------------------------------------

def tilted_plane(x0, x1, rng, spacing=0.005):
    """Samples of z = 0.0123 + 0.05 x over [x0, x1) x [0, 0.1), 1 mm noise."""
    g = np.arange(x0, x1 - 1e-9, spacing)
    gy = np.arange(0.0, 0.1 - 1e-9, spacing)
    x, y = np.meshgrid(g, gy)
    x, y = x.ravel(), y.ravel()
    z = 0.0123 + 0.05 * x + 0.001 * rng.uniform(-1, 1, x.size)
    n = np.tile(np.array([-0.05, 0.0, 1.0]) / np.hypot(0.05, 1.0), (x.size, 1))
    return PointCloud(np.stack([x, y, z], axis=1), n, np.full((x.size, 3), 0.5), np.zeros(x.size))


def t_junctions(mesh: TriangleMesh, tol=1e-9) -> int:
    """Vertices lying strictly inside an open edge."""
    edges, counts = edge_face_counts(mesh.faces)
    count = 0
    for a, b in edges[counts == 1]:
        p, q = mesh.vertices[a], mesh.vertices[b]
        d = q - p
        t = (mesh.vertices - p) @ d / (d @ d)
        off = np.linalg.norm(mesh.vertices - (p + t[:, None] * d), axis=1)
        inside = (t > tol) & (t < 1 - tol) & (off < tol)
        inside[[a, b]] = False
        count += int(inside.sum())
    return count


def seam_case(curvatures) -> dict:
    """Tilted plane over two leaf regions, one export window each.

    The window curvatures set the leaf levels: high curvature subdivides to
    L = 3, zero keeps L = 1.
    """
    rng = np.random.default_rng(6)
    tree = HybridVoxelOctree((0.0, 0.0, -0.1), leaf_edge=0.05, max_depth=4, t_min=0.004)
    g = GlobalMesh()
    steps = []
    for (x0, x1), curv in zip([(0.0, 0.1), (0.1, 0.2)], curvatures):
        cloud = tilted_plane(x0, x1, rng)
        cloud.curvatures[:] = curv
        tree.insert_points(cloud)
        dirty = tree.dirty_codes()
        raw = extract_partial_mesh(tree)
        p = lock_shared_boundary(raw, g)
        r = refine(p, tree.collect_supervision(dirty), iters=100, seed=len(steps)).mesh
        steps.append((raw, r, g.to_mesh()))
        g = merge_partial(g, r)
    (raw_a, _, _), (raw_b, rb, before) = steps
    gm = g.to_mesh()

    # the seam is the low-x face of the second window's leaf region
    owners_b = np.unique(rb.face_owner)
    seam_x = min(tree.leaf_min(tree.leaves[int(c)])[0] for c in owners_b)
    on_b = np.abs(raw_b.vertices[:, 0] - seam_x) < 1e-9
    kept_a = ~np.isin(raw_a.face_owner, owners_b)
    a_verts = np.unique(raw_a.faces[kept_a])
    on_a = a_verts[np.abs(raw_a.vertices[a_verts, 0] - seam_x) < 1e-9]
    unmatched = int((~np.isin(raw_b.keys[on_b], before.keys)).sum())
    unmatched += int((~np.isin(raw_a.keys[on_a], raw_b.keys)).sum())

    tris = np.sort(gm.faces, axis=1)
    _, counts = edge_face_counts(gm.faces)
    # locked seam vertices: same bytes before the merge, in the refined
    # second partial and in the final global mesh
    locked = rb.keys[rb.locked]
    at = lambda m: np.argsort(m.keys)[np.searchsorted(m.keys, locked, sorter=np.argsort(m.keys))]
    stable = (len(locked) > 0
              and before.vertices[at(before)].tobytes() == rb.vertices[rb.locked].tobytes()
              == gm.vertices[at(gm)].tobytes())
    levels = sorted({tree.leaves[int(c)].level for c in np.unique(gm.face_owner)})
    return dict(seam=int(on_b.sum()), unmatched=unmatched, tj=t_junctions(gm),
                dup=len(tris) - len(np.unique(tris, axis=0)), nonmanifold=int((counts > 2).sum()),
                locked=len(locked), stable=stable, levels=levels,
                moved=float(np.abs(rb.vertices - raw_b.vertices)[~rb.locked].max()))


def test_t_junction_counter_sees_a_crack():
    # one big triangle against two small ones: the split vertex is a T-junction
    v = [[0, 0, 0], [0, 2, 0], [-1, 1, 0], [0, 1, 0], [1, 0, 0], [1, 2, 0]]
    m = TriangleMesh(np.array(v, float), np.array([[0, 1, 2], [0, 4, 3], [3, 4, 5], [3, 5, 1]]))
    assert t_junctions(m) == 1
    welded = TriangleMesh(m.vertices, np.array([[0, 3, 2], [3, 1, 2], [0, 4, 3], [3, 4, 5], [3, 5, 1]]))
    assert t_junctions(welded) == 0


def test_criterion_6_seams():
    t0 = time.perf_counter()
    cases = {"same level": seam_case((1.0, 1.0)), "mixed level": seam_case((1.0, 0.0))}
    dt = time.perf_counter() - t0
    ok = dt < 30 and all(c["seam"] > 0 and c["unmatched"] == 0 and c["tj"] == 0 and c["dup"] == 0
                         and c["nonmanifold"] == 0 and c["stable"] and c["moved"] > 0
                         for c in cases.values())
    assert cases["mixed level"]["levels"] == [1, 3]
    detail = "; ".join(f"{k} L{c['levels']}: {c['seam']} seam vertices, {c['unmatched']} unmatched, "
                       f"{c['tj']} T-junctions, {c['dup']} duplicate faces, "
                       f"{c['locked']} locked byte-stable {c['stable']}" for k, c in cases.items())
    record(6, ok, f"{detail}; {dt:.1f} s")
    assert ok


# -- 7. lighting recovery ---------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_sh_recovery():
    t0 = time.perf_counter()
    room = BoxRoom((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0), albedo=(0.6, 0.6, 0.6))
    scene = SyntheticScene([room])
    intr = default_intrinsics()
    frames = [render_scene(scene, p, intr, index=i) for i, p in enumerate(camera_path("room", 8))]
    mesh = box_room_mesh(room, 0.1)
    r = refine_shading(mesh, frames, ShadingModel.neutral(mesh.n_vertices), None, 200, warmup=400,
                       move_vertices=False, raster_every=10**9)
    l_hat, l_true = r.model.sh, np.asarray(scene.sh)
    # cosine is invariant to the albedo / lighting scale ambiguity
    cos = abs(l_hat @ l_true) / np.linalg.norm(l_hat) / np.linalg.norm(l_true)
    a, b = [], []
    for f in frames:
        buf = rasterize(r.mesh, f.pose, f.intrinsics)
        a.append(shade(buf, r.mesh, r.model)[buf.covered])
        b.append(f.color[buf.covered])
    p = psnr(np.concatenate(a), np.concatenate(b))
    dt = time.perf_counter() - t0
    ok = p >= 35.0 and cos >= 0.99 and dt < 120
    record(7, ok, f"PSNR {p:.1f} dB, |cos| {cos:.5f}, {dt:.0f} s")
    assert ok


# -- 8. determinism ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    blobs = []
    for k in range(2):
        cfg = PipelineConfig(scene="room", frames=12, cadence=6, iterations=40, output=str(tmp_path / f"run{k}"))
        run(cfg)
        blobs.append((tmp_path / f"run{k}" / "global.ply").read_bytes())
    dt = time.perf_counter() - t0
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 1000
    record(8, ok, f"global.ply {len(blobs[0])} bytes, identical: {blobs[0] == blobs[1]}, {dt:.0f} s")
    assert ok


# -- 9. throughput ------------------------------------------------------------------------

def room_corner_cloud(n=819_200, seed=0) -> PointCloud:
    """Three walls of a 4 x 4 x 3 m room corner, uniformly sampled."""
    rng = np.random.default_rng(seed)
    u = rng.random((n, 2))
    wall = rng.integers(0, 3, n)
    pts = np.zeros((n, 3))
    pts[:, 0] = np.where(wall == 0, 0.0, u[:, 0] * 4)
    pts[:, 1] = np.where(wall == 1, 0.0, u[:, 1] * 4)
    pts[:, 2] = np.where(wall == 2, 0.0, np.where(wall == 0, u[:, 0], u[:, 1]) * 3)
    nrm = np.zeros((n, 3))
    nrm[np.arange(n), wall] = 1.0
    return PointCloud(pts, nrm, np.full((n, 3), 0.5), np.zeros(n))


def neighbour_ns(depths, lookups=4000, rounds=80) -> dict[int, float]:
    """Best-of ns per lookup.  Many short interleaved rounds, so load spikes on
    the machine hit every depth alike and rarely cover a whole round."""
    rng = np.random.default_rng(1)
    d = rng.normal(size=(50000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cloud = PointCloud(0.7 * d, d, np.full((50000, 3), 0.5), np.zeros(50000))
    offs = [(1, 0, 0), (0, -1, 0), (0, 0, 1), (-1, 1, 0)]
    cases = {}
    for depth in depths:
        t = HybridVoxelOctree.centered(np.zeros(3), leaf_edge=0.05, max_depth=depth, t_min=0.02)
        t.insert_points(cloud)
        leaves = list(t.leaves.values())
        cases[depth] = (t, [(leaves[i % len(leaves)], offs[i & 3]) for i in range(lookups)])
    best = {depth: np.inf for depth in depths}
    for _ in range(rounds):
        for depth, (t, picks) in cases.items():
            t0 = time.perf_counter()
            for leaf, off in picks:
                t.neighbor(leaf, off)
            best[depth] = min(best[depth], time.perf_counter() - t0)
    return {depth: b / lookups * 1e9 for depth, b in best.items()}


def throughput_measurements() -> dict:
    cloud = room_corner_cloud()
    HybridVoxelOctree.centered((2, 2, 1.5), leaf_edge=0.05).insert_points(room_corner_cloud(20000, 1))  # JIT warm-up
    times = []
    for _ in range(3):
        tree = HybridVoxelOctree.centered((2.0, 2.0, 1.5), leaf_edge=0.05, l_max=3)
        t0 = time.perf_counter()
        stats = tree.insert_points(cloud)
        times.append(time.perf_counter() - t0)
    gc.disable()  # as timeit does: collector pauses would land on whichever depth is running
    try:
        ns = neighbour_ns((5, 10, 20))
    finally:
        gc.enable()
    return dict(t_ins=float(np.median(times)), stored=stats.points_stored, offered=stats.points_offered, ns=ns)


def test_criterion_9_throughput():
    # timed in a fresh interpreter: the heap left by earlier tests skews
    # per-object memory locality from one structure to the next
    with ProcessPoolExecutor(1, mp_context=multiprocessing.get_context("spawn")) as ex:
        m = ex.submit(throughput_measurements).result()
    ns = m["ns"]
    mid = float(np.median(list(ns.values())))
    flat = all(abs(v / mid - 1) <= 0.2 for v in ns.values())
    ok = m["t_ins"] <= 2.0 and flat and m["offered"] == 819_200
    record(9, ok, f"insert {m['t_ins']:.2f} s (median of 3, {m['stored']} stored), neighbour ns "
                  + " / ".join(f"d{k} {v:.0f}" for k, v in ns.items()))
    assert ok
