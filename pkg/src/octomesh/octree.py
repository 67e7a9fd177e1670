"""Sparse Morton-indexed octree whose leaves are small multi-level voxels.

All leaves have the same edge length; extra resolution lives inside a leaf
as an ``L x L x L`` sub-grid (``L`` is 1 or ``l_max``).  Leaves keep a
de-duplicated copy of the points routed to them, and after meshing, their
corner SDF samples and owned triangles.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels, morton
from .geometry import PointCloud

log = logging.getLogger(__name__)


@dataclass
class InsertStats:
    points_offered: int = 0
    points_stored: int = 0
    new_leaves: int = 0
    dirtied_leaves: int = 0
    out_of_bounds: int = 0
    subdivided: int = 0


@dataclass
class LeafVoxel:
    code: int
    grid: tuple
    level: int = 1
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    curvatures: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dirty: bool = False
    corner_sdf: object = None
    # lattice samples (packed coords, values, valid) used at the last extraction
    lattice: tuple | None = None
    face_keys: np.ndarray | None = None
    epoch: int = 0

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def mean_curvature(self) -> float:
        return float(self.curvatures.mean()) if len(self.curvatures) else 0.0


class StoredPoint(NamedTuple):
    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    curvature: float
    leaf: int


@dataclass
class PointIndex:
    """Snapshot of all stored points, grouped by leaf in Morton order."""

    codes: np.ndarray  # sorted uint64 leaf codes
    starts: np.ndarray
    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    curvatures: np.ndarray


class HybridVoxelOctree:
    def __init__(self, origin=(0.0, 0.0, 0.0), leaf_edge: float = 0.05, max_depth: int = 16,
                 t_min: float = 0.02, t_cur: float = 0.01, l_max: int = 3):
        if leaf_edge <= 0:
            raise ValueError("leaf_edge must be positive")
        if not 1 <= max_depth <= morton.MAX_DEPTH:
            raise ValueError(f"max_depth must be in [1, {morton.MAX_DEPTH}]")
        if l_max < 1:
            raise ValueError("l_max must be >= 1")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.leaf_edge = float(leaf_edge)
        self.max_depth = int(max_depth)
        self.t_min = float(t_min)
        self.t_cur = float(t_cur)
        self.l_max = int(l_max)
        self.ncell = 1 << self.max_depth
        self.leaves: dict[int, LeafVoxel] = {}
        self._version = 0
        self._index: PointIndex | None = None
        self._index_version = -1

    @classmethod
    def centered(cls, center, leaf_edge: float = 0.05, max_depth: int = 16, **kw):
        """Tree of extent ``2**max_depth * leaf_edge`` centred on ``center``."""
        half = (1 << (max_depth - 1)) * leaf_edge
        return cls(np.asarray(center, dtype=np.float64) - half, leaf_edge, max_depth, **kw)

    # -- addressing ---------------------------------------------------------
    def leaf_grid(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(pts, dtype=np.float64) - self.origin) / self.leaf_edge).astype(np.int64)

    def in_bounds(self, grid: np.ndarray) -> np.ndarray:
        return np.all((grid >= 0) & (grid < self.ncell), axis=-1)

    def leaf_min(self, leaf: LeafVoxel) -> np.ndarray:
        return self.origin + np.asarray(leaf.grid, dtype=np.float64) * self.leaf_edge

    def code_of(self, ix: int, iy: int, iz: int) -> int:
        return morton.morton_encode(ix, iy, iz, self.max_depth)

    def neighbor_codes(self, code: int) -> list[int]:
        return morton.neighbor_codes(code, self.max_depth)

    def neighbor(self, leaf: LeafVoxel, offset) -> LeafVoxel | None:
        c = morton.neighbor_code(leaf.code, offset, self.max_depth)
        return None if c is None else self.leaves.get(c)

    def dirty_codes(self) -> list[int]:
        return sorted(c for c, l in self.leaves.items() if l.dirty)

    # -- insertion ----------------------------------------------------------
    def insert_points(self, cloud: PointCloud, keep_ratio: float = 1.0) -> InsertStats:
        """Route points to leaves, keeping only those at least ``t_min`` (L1)
        away from everything already stored in the same leaf."""
        if not 0 < keep_ratio <= 1:
            raise ValueError("keep_ratio must be in (0, 1]")
        if cloud.normals is None or cloud.curvatures is None:
            raise ValueError("points need normals and curvatures before insertion")
        stats = InsertStats(points_offered=len(cloud))
        if len(cloud) == 0:
            return stats
        stride = math.ceil(1.0 / keep_ratio - 1e-9)
        pos = cloud.positions[::stride]
        nrm = cloud.normals[::stride]
        cur = cloud.curvatures[::stride]
        col = cloud.colors[::stride] if cloud.colors is not None else np.full((len(pos), 3), 0.5)

        grid = self.leaf_grid(pos)
        inside = self.in_bounds(grid)
        stats.out_of_bounds = int((~inside).sum())
        if stats.out_of_bounds:
            log.warning("%d points outside the octree bounds were dropped", stats.out_of_bounds)
            pos, nrm, cur, col, grid = pos[inside], nrm[inside], cur[inside], col[inside], grid[inside]
        if len(pos) == 0:
            return stats

        codes = morton.encode_array(grid)
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        pos, nrm, cur, col, grid = pos[order], nrm[order], cur[order], col[order], grid[order]
        brk = np.flatnonzero(codes[1:] != codes[:-1]) + 1
        starts = np.concatenate([[0], brk, [len(codes)]]).astype(np.int64)
        group_codes = codes[starts[:-1]].tolist()

        leaves = []
        old = []
        old_starts = [0]
        for g, c in enumerate(group_codes):
            leaf = self.leaves.get(c)
            if leaf is None:
                gx, gy, gz = grid[starts[g]]
                leaf = LeafVoxel(c, (int(gx), int(gy), int(gz)))
                self.leaves[c] = leaf
                stats.new_leaves += 1
            leaves.append(leaf)
            if leaf.n_points:
                old.append(leaf.positions)
            old_starts.append(old_starts[-1] + leaf.n_points)
        old_pos = np.concatenate(old) if old else np.zeros((0, 3))
        keep = kernels.dedup_l1(pos, starts, old_pos, np.asarray(old_starts), self.t_min)

        kept_per = np.add.reduceat(keep.astype(np.int64), starts[:-1])
        for g in np.flatnonzero(kept_per):
            leaf = leaves[g]
            s, e = starts[g], starts[g + 1]
            k = keep[s:e]
            leaf.positions = np.concatenate([leaf.positions, pos[s:e][k]])
            leaf.normals = np.concatenate([leaf.normals, nrm[s:e][k]])
            leaf.colors = np.concatenate([leaf.colors, col[s:e][k]])
            leaf.curvatures = np.concatenate([leaf.curvatures, cur[s:e][k]])
            leaf.dirty = True
            stats.dirtied_leaves += 1
            before = leaf.level
            if self.maybe_subdivide(leaf).level != before:
                stats.subdivided += 1
        stats.points_stored = int(keep.sum())
        self._version += 1
        return stats

    def maybe_subdivide(self, leaf: LeafVoxel) -> LeafVoxel:
        """Raise a level-1 leaf to ``l_max`` once its mean curvature exceeds
        ``t_cur``.

        Extracted neighbours are marked dirty so their shared seam is rebuilt
        against the finer lattice.  Leaves never coarsen.
        """
        if leaf.level != 1 or self.l_max == 1 or leaf.mean_curvature <= self.t_cur:
            return leaf
        leaf.level = self.l_max
        for c in self.neighbor_codes(leaf.code):
            nb = self.leaves.get(c)
            if nb is not None and nb.face_keys is not None:
                nb.dirty = True
        return leaf

    # -- queries ------------------------------------------------------------
    def point_index(self) -> PointIndex:
        if self._index is not None and self._index_version == self._version:
            return self._index
        codes = sorted(c for c, l in self.leaves.items() if l.n_points)
        ls = [self.leaves[c] for c in codes]
        counts = np.array([l.n_points for l in ls], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        cat = lambda name, shape: (np.concatenate([getattr(l, name) for l in ls])
                                   if ls else np.zeros(shape))
        self._index = PointIndex(np.array(codes, dtype=np.uint64), starts,
                                 cat("positions", (0, 3)), cat("normals", (0, 3)),
                                 cat("colors", (0, 3)), cat("curvatures", (0,)))
        self._index_version = self._version
        return self._index

    def query_nearest(self, pts: np.ndarray, radius: float):
        """Batched nearest stored point; ``(index into point_index(), dist)``."""
        idx = self.point_index()
        return kernels.nearest_in_cells(pts, self.origin, self.leaf_edge, self.ncell, idx.codes,
                                        idx.starts, idx.positions, radius)

    def nearest_stored_point(self, p, radius: float):
        """Closest stored point within ``radius`` of ``p``, or None."""
        if radius > 2 * self.leaf_edge:
            raise ValueError("radius must not exceed two leaf edges")
        i, d = self.query_nearest(np.asarray(p, dtype=np.float64).reshape(1, 3), radius)
        if i[0] < 0:
            return None
        idx = self.point_index()
        k = int(i[0])
        leaf = int(idx.codes[np.searchsorted(idx.starts, k, side="right") - 1])
        rec = StoredPoint(idx.positions[k], idx.normals[k], idx.colors[k],
                          float(idx.curvatures[k]), leaf)
        return rec, float(d[0])

    def collect_supervision(self, codes) -> PointCloud:
        """All stored points of the given leaves, leaf by leaf in code order."""
        ls = [self.leaves[c] for c in sorted(codes) if c in self.leaves]
        if not ls:
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        return PointCloud(np.concatenate([l.positions for l in ls]),
                          np.concatenate([l.normals for l in ls]),
                          np.concatenate([l.colors for l in ls]),
                          np.concatenate([l.curvatures for l in ls]))

    @property
    def n_points(self) -> int:
        return sum(l.n_points for l in self.leaves.values())

    def dump(self) -> str:
        """One line per leaf: hex code, level, stored point count."""
        return "\n".join(f"{c:x} {self.leaves[c].level} {self.leaves[c].n_points}"
                         for c in sorted(self.leaves))
