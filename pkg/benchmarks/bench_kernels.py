"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--points N] [--repeat R]

Each kernel is exercised through the public operation that uses it:
point insertion (L1 dedup), nearest-point queries and rasterization.  A last
table times neighbour lookups at several octree depths.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from octomesh import _accel
from octomesh.evaluation import default_intrinsics, icosphere
from octomesh.geometry import PointCloud, look_at
from octomesh.octree import HybridVoxelOctree
from octomesh.shading import rasterize


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def sphere_points(n: int, seed: int = 0, radius: float = 1.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return PointCloud(radius * d, d, np.full((n, 3), 0.5), np.zeros(n))


def workloads(n_points: int):
    cloud = sphere_points(n_points)
    queries = sphere_points(n_points // 4, seed=1).positions * 1.01

    def insert():
        t = HybridVoxelOctree.centered(np.zeros(3), leaf_edge=0.05, t_min=0.02)
        t.insert_points(cloud)
        return t

    tree = insert()
    mesh = icosphere(5, radius=1.0)
    intr = default_intrinsics(320, 240)
    pose = look_at((0.0, -3.0, 0.5), (0.0, 0.0, 0.0))
    return {
        "insert (dedup_l1)": insert,
        "query (nearest_in_cells)": lambda: tree.query_nearest(queries, 0.075),
        "raster (rasterize_faces)": lambda: rasterize(mesh, pose, intr),
    }


def neighbour_timing(depths, rounds: int = 80, lookups: int = 4000):
    """Best-of ns per lookup over many short rounds, interleaved across depths
    so load spikes on the machine hit every depth alike."""
    offs = [(1, 0, 0), (0, -1, 0), (0, 0, 1), (-1, 1, 0)]
    cases = []
    for depth in depths:
        t = HybridVoxelOctree.centered(np.zeros(3), leaf_edge=0.05, max_depth=depth, t_min=0.02)
        t.insert_points(sphere_points(50000, radius=0.7))  # fits the 1.6 m span of depth 5
        leaves = list(t.leaves.values())
        cases.append((t, [(leaves[i % len(leaves)], offs[i & 3]) for i in range(lookups)]))
    best = [np.inf] * len(depths)
    for _ in range(rounds):
        for k, (t, picks) in enumerate(cases):
            t0 = time.perf_counter()
            for leaf, off in picks:
                t.neighbor(leaf, off)
            best[k] = min(best[k], time.perf_counter() - t0)
    return [(d, b / lookups * 1e9) for d, b in zip(depths, best)]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=400000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    saved = _accel.USE_NUMBA
    results = {}
    paths = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]
    for path in paths:
        _accel.USE_NUMBA = path == "numba"
        work = workloads(args.points)
        for name, fn in work.items():
            fn()  # warm-up (JIT compile or cache load)
            results[(name, path)] = best_of(fn, args.repeat)
    _accel.USE_NUMBA = saved

    print(f"{'kernel':28s}" + "".join(f"{p:>12s}" for p in paths) + ("     speedup" if len(paths) == 2 else ""))
    for name in results_names(results):
        row = [results[(name, p)] for p in paths]
        line = f"{name:28s}" + "".join(f"{t * 1000:10.1f}ms" for t in row)
        if len(paths) == 2:
            line += f"{row[1] / row[0]:11.1f}x"
        print(line)

    print()
    print(f"{'max_depth':>10s}{'ns / neighbour lookup':>24s}")
    for depth, ns in neighbour_timing((5, 10, 20)):
        print(f"{depth:10d}{ns:24.0f}")


def results_names(results):
    seen = []
    for name, _ in results:
        if name not in seen:
            seen.append(name)
    return seen


if __name__ == "__main__":
    main()
