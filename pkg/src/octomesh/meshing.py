"""Corner SDF sampling and sparse-voxel marching cubes.

SDF samples live on a global *fine lattice* of spacing ``leaf_edge / l_max``.
A level-``L`` leaf samples every ``l_max / L``-th lattice point, so a corner
shared by two leaves is the same lattice point for both and gets one value.
Every mesh vertex lies on a lattice edge and carries an integer key built
from that edge; equal keys weld.

Where a coarse leaf touches a fine one, the coarse side gives way: its
crossings on shared edges move to the fine crossing on the same line, and
its polygon edges on a shared face are replaced by the fine polyline on that
face.  The seam then has no T-junctions.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import mc_table as mc
from .mesh import TriangleMesh, vertex_normals
from .octree import HybridVoxelOctree, LeafVoxel

LATTICE_BITS = 19
_LMASK = (1 << LATTICE_BITS) - 1
CLAMP = (0.01, 0.99)
SEARCH_RADIUS_FACTOR = 1.5


@dataclass
class CornerGrid:
    level: int
    values: np.ndarray  # (L+1)**3, x fastest
    valid: np.ndarray

    def at(self, i: int, j: int, k: int) -> float:
        n = self.level + 1
        return float(self.values[i + n * j + n * n * k])


def pack_lattice(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.int64)
    return f[..., 0] | (f[..., 1] << LATTICE_BITS) | (f[..., 2] << (2 * LATTICE_BITS))


def unpack_lattice(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    return np.stack([p & _LMASK, (p >> LATTICE_BITS) & _LMASK, (p >> (2 * LATTICE_BITS)) & _LMASK], axis=-1)


def vertex_key(f_start: np.ndarray, kind, coarse) -> np.ndarray:
    """Weld key: lattice edge start, kind (0-2 edge axis, 3+ cell centroid),
    and whether the edge spans a coarse cell."""
    return (pack_lattice(f_start) << 4) | (np.asarray(kind, dtype=np.int64) << 1) | np.asarray(coarse, dtype=np.int64)


def key_kind(keys: np.ndarray) -> np.ndarray:
    return (np.asarray(keys) >> 1) & 7


def _check_lattice(tree: HybridVoxelOctree) -> None:
    if tree.l_max * tree.ncell >= (1 << LATTICE_BITS):
        raise ValueError("octree too deep for lattice keys; use max_depth <= 17 with l_max = 3")


@lru_cache(maxsize=None)
def corner_offsets(level: int) -> np.ndarray:
    r = np.arange(level + 1)
    k, j, i = np.meshgrid(r, r, r, indexing="ij")
    out = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    out.flags.writeable = False
    return out


def leaf_corner_lattice(tree: HybridVoxelOctree, leaf: LeafVoxel, level: int | None = None) -> np.ndarray:
    level = leaf.level if level is None else level
    step = tree.l_max // level
    return np.asarray(leaf.grid, dtype=np.int64) * tree.l_max + corner_offsets(level) * step


def lattice_positions(tree: HybridVoxelOctree, f: np.ndarray) -> np.ndarray:
    """World position of lattice points.  Leaf corners come out bit-identical
    to ``origin + grid * leaf_edge`` whatever ``l_max`` is."""
    f = np.asarray(f, dtype=np.int64)
    whole, frac = np.divmod(f, tree.l_max)
    return tree.origin + whole * tree.leaf_edge + frac * (tree.leaf_edge / tree.l_max)


def sdf_at(tree: HybridVoxelOctree, pts: np.ndarray, radius: float | None = None):
    """Point-to-tangent-plane distance ``n_q . (q - p)`` of the nearest stored
    point ``q``.  Returns ``(values, valid)``."""
    radius = SEARCH_RADIUS_FACTOR * tree.leaf_edge if radius is None else radius
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    idx, _ = tree.query_nearest(pts, radius)
    valid = idx >= 0
    vals = np.zeros(len(pts))
    if valid.any():
        pi = tree.point_index()
        q = pi.positions[idx[valid]]
        n = pi.normals[idx[valid]]
        vals[valid] = np.einsum("ij,ij->i", n, q - pts[valid])
    return vals, valid


def compute_corner_sdf(tree: HybridVoxelOctree, leaf: LeafVoxel, radius: float | None = None) -> CornerGrid:
    f = leaf_corner_lattice(tree, leaf)
    vals, valid = sdf_at(tree, lattice_positions(tree, f), radius)
    return CornerGrid(leaf.level, vals, valid)


class LatticeField:
    """SDF samples on fine-lattice points, keyed by packed coordinates."""

    def __init__(self, tree: HybridVoxelOctree):
        self.tree = tree
        self.keys = np.zeros(0, dtype=np.int64)
        self.values = np.zeros(0)
        self.valid = np.zeros(0, dtype=bool)

    def add(self, keys, values, valid) -> None:
        keys = np.concatenate([self.keys, keys])
        values = np.concatenate([self.values, values])
        valid = np.concatenate([self.valid, valid])
        keys, first = np.unique(keys, return_index=True)
        self.keys, self.values, self.valid = keys, values[first], valid[first]

    def ensure(self, f: np.ndarray) -> None:
        keys = np.unique(pack_lattice(f))
        missing = keys[~self.contains(keys)]
        if len(missing):
            vals, ok = sdf_at(self.tree, lattice_positions(self.tree, unpack_lattice(missing)))
            self.add(missing, vals, ok)

    def contains(self, keys) -> np.ndarray:
        i = np.searchsorted(self.keys, keys)
        i = np.minimum(i, max(len(self.keys) - 1, 0))
        return (len(self.keys) > 0) & (self.keys[i] == keys) if len(self.keys) else np.zeros(len(keys), bool)

    def lookup(self, f: np.ndarray):
        keys = pack_lattice(f)
        flat = keys.ravel()
        i = np.searchsorted(self.keys, flat)
        if len(flat) and (np.any(i >= len(self.keys)) or np.any(self.keys[np.minimum(i, len(self.keys) - 1)] != flat)):
            raise KeyError("lattice point not sampled")
        return self.values[i].reshape(keys.shape), self.valid[i].reshape(keys.shape)


def _edge_points(f_start, axis, span):
    f_end = np.array(f_start, dtype=np.int64, copy=True)
    f_end[np.arange(len(f_end)), axis] += span
    return f_end


def _crossing(tree, f_start, axis, span, v0, v1):
    f_end = _edge_points(f_start, axis, span)
    t = np.clip(v0 / (v0 - v1), CLAMP[0], CLAMP[1])
    p0 = lattice_positions(tree, f_start)
    p1 = lattice_positions(tree, f_end)
    return p0 + t[:, None] * (p1 - p0)


_CELL_CORNERS = mc.CORNERS


def _cell_cases(values, valid):
    neg = values < 0
    case = (neg * (1 << np.arange(8))).sum(axis=1)
    ok = valid.all(axis=1) & (case > 0) & (case < 255)
    return case, ok


@lru_cache(maxsize=None)
def _grid_cells(level: int):
    """Per cell of a level-``level`` grid: min offset and the 8 corner indices."""
    r = np.arange(level)
    k, j, i = np.meshgrid(r, r, r, indexing="ij")
    cells = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    n = level + 1
    c = cells[:, None, :] + _CELL_CORNERS[None, :, :]
    idx = c[..., 0] + n * c[..., 1] + n * n * c[..., 2]
    return cells, idx


@dataclass
class LeafTriangles:
    keys: np.ndarray  # (t, 3)
    positions: np.ndarray  # (t, 3, 3)


def _table_triangles(tree, cell_min, span, values, case, coarse_flag):
    """Vectorised table lookup for many cells at once."""
    counts = mc.TRI_COUNT[case]
    cell_of = np.repeat(np.arange(len(case)), counts)
    tri_in = np.concatenate([np.arange(c) for c in counts]) if len(counts) else np.zeros(0, np.int64)
    edges = mc.TRI_TABLE[case[cell_of], tri_in]  # (t, 3)
    cell3 = np.repeat(cell_of, 3)
    e = edges.ravel()
    s, t_, axis = mc.EDGE_START[e], mc.EDGE_END[e], mc.EDGE_AXIS[e]
    f0 = cell_min[cell3] + _CELL_CORNERS[s] * span[cell3, None]
    v0 = values[cell3, s]
    v1 = values[cell3, t_]
    pos = _crossing(tree, f0, axis, span[cell3], v0, v1)
    keys = vertex_key(f0, axis, coarse_flag[cell3])
    return cell_of, keys.reshape(-1, 3), pos.reshape(-1, 3, 3)


class _SeamCell:
    """Slow path for a coarse cell touching finer leaves."""

    def __init__(self, tree, field, leaf, fine_faces, fine_edges):
        self.tree = tree
        self.field = field
        self.leaf = leaf
        self.fine_faces = fine_faces  # cube face ids shared with a fine leaf
        self.fine_edges = fine_edges  # cube edge ids shared with a fine leaf
        self.base = np.asarray(leaf.grid, dtype=np.int64) * tree.l_max
        self.span = tree.l_max

    def edge_vertex(self, e: int, values):
        s, t, a = mc.EDGE_START[e], mc.EDGE_END[e], mc.EDGE_AXIS[e]
        f0 = self.base + _CELL_CORNERS[s] * self.span
        pos = _crossing(self.tree, f0[None], np.array([a]), np.array([self.span]),
                        np.array([values[s]]), np.array([values[t]]))[0]
        key = int(vertex_key(f0, a, 1))
        if e in self.fine_edges:
            snapped = self._snap(f0, a, pos)
            if snapped is not None:
                return snapped
        return key, pos

    def _snap(self, f0, a, coarse_pos):
        n = self.span
        fs = f0[None, :] + np.outer(np.arange(n + 1), np.eye(3, dtype=np.int64)[a])
        vals, ok = self.field.lookup(fs)
        neg = vals < 0
        sub = [m for m in range(n) if neg[m] != neg[m + 1] and ok[m] and ok[m + 1]]
        if not sub:
            return None
        sub = np.array(sub)
        pos = _crossing(self.tree, fs[sub], np.full(len(sub), a), np.ones(len(sub), np.int64),
                        vals[sub], vals[sub + 1])
        best = int(np.argmin(np.linalg.norm(pos - coarse_pos, axis=1)))
        return int(vertex_key(fs[sub[best]], a, 0)), pos[best]

    def face_graph(self, face: int):
        """Fine crossings and segments on one cube face, as an adjacency map."""
        n = self.span
        a = face // 2
        side = face % 2
        b, c = (a + 1) % 3, (a + 2) % 3
        ring_uv = [(0, 0), (1, 0), (1, 1), (0, 1)]
        if side == 0:
            ring_uv = ring_uv[::-1]
        adj: dict[int, list[int]] = {}
        pos: dict[int, np.ndarray] = {}
        for ub in range(n):
            for uc in range(n):
                ring = []
                for db, dc in ring_uv:
                    f = self.base.copy()
                    f[a] += side * n
                    f[b] += ub + db
                    f[c] += uc + dc
                    ring.append(f)
                ring = np.array(ring)
                vals, ok = self.field.lookup(ring)
                if not ok.all():
                    continue
                segs = mc.face_segments([v < 0 for v in vals])
                if not segs:
                    continue
                ids = {}
                for r in {x for sg in segs for x in sg}:
                    p, q = ring[r], ring[(r + 1) % 4]
                    lo = np.minimum(p, q)
                    ax = int(np.flatnonzero(p != q)[0])
                    v_lo, v_hi = (vals[r], vals[(r + 1) % 4]) if p[ax] < q[ax] else (vals[(r + 1) % 4], vals[r])
                    k = int(vertex_key(lo, ax, 0))
                    pos[k] = _crossing(self.tree, lo[None], np.array([ax]), np.array([1]),
                                       np.array([v_lo]), np.array([v_hi]))[0]
                    ids[r] = k
                for s_, t_ in segs:
                    adj.setdefault(ids[s_], []).append(ids[t_])
                    adj.setdefault(ids[t_], []).append(ids[s_])
        return adj, pos

    def triangles(self, case: int, values):
        keys_out, pos_out = [], []
        graphs = {}
        for li, loop in enumerate(mc.LOOPS[case]):
            verts = [self.edge_vertex(e, values) for e in loop]
            ring_keys = [verts[0][0]]
            ring_pos = [verts[0][1]]
            grown = False
            for i in range(len(loop)):
                e1, e2 = loop[i], loop[(i + 1) % len(loop)]
                k2, p2 = verts[(i + 1) % len(loop)]
                f = mc.edge_face(e1, e2)
                if f in self.fine_faces:
                    if f not in graphs:
                        graphs[f] = self.face_graph(f)
                    path = _path(graphs[f][0], verts[i][0], k2)
                    if path is not None and len(path) > 2:
                        for k in path[1:-1]:
                            ring_keys.append(k)
                            ring_pos.append(graphs[f][1][k])
                        grown = True
                if i + 1 < len(loop):
                    ring_keys.append(k2)
                    ring_pos.append(p2)
            if grown:
                ck = int(vertex_key(self.base, 3 + li, 1))
                cp = np.mean(ring_pos, axis=0)
                m = len(ring_keys)
                for i in range(m):
                    keys_out.append((ck, ring_keys[i], ring_keys[(i + 1) % m]))
                    pos_out.append((cp, ring_pos[i], ring_pos[(i + 1) % m]))
            else:
                for i in range(1, len(ring_keys) - 1):
                    keys_out.append((ring_keys[0], ring_keys[i], ring_keys[i + 1]))
                    pos_out.append((ring_pos[0], ring_pos[i], ring_pos[i + 1]))
        return (np.array(keys_out, dtype=np.int64).reshape(-1, 3),
                np.array(pos_out, dtype=np.float64).reshape(-1, 3, 3))


def _path(adj, a, b):
    if a not in adj or b not in adj:
        return None
    prev = {a: None}
    dq = deque([a])
    while dq:
        x = dq.popleft()
        if x == b:
            break
        for y in sorted(adj[x]):
            if y not in prev:
                prev[y] = x
                dq.append(y)
    if b not in prev:
        return None
    out = [b]
    while out[-1] != a:
        out.append(prev[out[-1]])
    return out[::-1]


def _edge_neighbor_offsets(e: int):
    a = mc.EDGE_AXIS[e]
    corner = _CELL_CORNERS[mc.EDGE_START[e]]
    b, c = [x for x in range(3) if x != a]
    outs = []
    for db in (0, 2 * corner[b] - 1):
        for dc in (0, 2 * corner[c] - 1):
            if db == 0 and dc == 0:
                continue
            off = [0, 0, 0]
            off[b], off[c] = db, dc
            outs.append(tuple(off))
    return outs


_FACE_OFFSETS = []
for _f in range(6):
    _o = [0, 0, 0]
    _o[_f // 2] = 1 if _f % 2 else -1
    _FACE_OFFSETS.append(tuple(_o))
_EDGE_OFFSETS = [_edge_neighbor_offsets(e) for e in range(12)]


def _fine_grids(tree: HybridVoxelOctree) -> frozenset:
    return frozenset(l.grid for l in tree.leaves.values() if l.level > 1)


def _fine_contacts(tree, leaf, neighbor_levels=None, fine_grids=None):
    """Cube faces and edges of a coarse leaf that touch a fine leaf."""
    if leaf.level == tree.l_max:
        return set(), set()
    if neighbor_levels is not None:
        def finer(off):
            return (neighbor_levels.get(tuple(off)) or 0) > leaf.level
    else:
        fine_grids = _fine_grids(tree) if fine_grids is None else fine_grids
        if not fine_grids:
            return set(), set()
        g = leaf.grid

        def finer(off):
            return (g[0] + off[0], g[1] + off[1], g[2] + off[2]) in fine_grids

    faces = {f for f in range(6) if finer(_FACE_OFFSETS[f])}
    edges = {e for e in range(12) if any(finer(o) for o in _EDGE_OFFSETS[e])}
    return faces, edges


def mesh_leaves(tree: HybridVoxelOctree, leaves: list[LeafVoxel], field: LatticeField,
                neighbor_levels=None, fine_grids=None) -> dict[int, LeafTriangles]:
    """Triangles of each leaf; the field must hold all corner samples (and the
    full fine lattice of coarse leaves that border fine ones)."""
    out: dict[int, LeafTriangles] = {}
    seam = []
    regular: dict[int, list[LeafVoxel]] = {}
    if neighbor_levels is None and fine_grids is None:
        fine_grids = _fine_grids(tree)
    for leaf in leaves:
        faces, edges = _fine_contacts(tree, leaf, neighbor_levels, fine_grids)
        if edges:
            seam.append((leaf, faces, edges))
        else:
            regular.setdefault(leaf.level, []).append(leaf)

    parts_keys: dict[int, list] = {}
    parts_pos: dict[int, list] = {}
    for level, group in sorted(regular.items()):
        cells, cidx = _grid_cells(level)
        step = tree.l_max // level
        grids = np.array([l.grid for l in group], dtype=np.int64)
        corner_f = grids[:, None, :] * tree.l_max + corner_offsets(level)[None] * step
        vals, ok = field.lookup(corner_f)
        cv = vals[:, cidx].reshape(-1, 8)
        cok = ok[:, cidx].reshape(-1, 8)
        cell_min = (grids[:, None, :] * tree.l_max + cells[None] * step).reshape(-1, 3)
        owner = np.repeat(np.arange(len(group)), len(cells))
        case, active = _cell_cases(cv, cok)
        sel = np.flatnonzero(active)
        if len(sel) == 0:
            continue
        span = np.full(len(sel), step, dtype=np.int64)
        coarse = np.full(len(sel), int(step != 1), dtype=np.int64)
        cell_of, keys, pos = _table_triangles(tree, cell_min[sel], span, cv[sel], case[sel], coarse)
        tri_owner = owner[sel][cell_of]
        order = np.argsort(tri_owner, kind="stable")
        tri_owner, keys, pos = tri_owner[order], keys[order], pos[order]
        bounds = np.searchsorted(tri_owner, np.arange(len(group) + 1))
        for i, leaf in enumerate(group):
            s, e = bounds[i], bounds[i + 1]
            if e > s:
                parts_keys.setdefault(leaf.code, []).append(keys[s:e])
                parts_pos.setdefault(leaf.code, []).append(pos[s:e])

    for leaf, faces, edges in seam:
        corner_f = leaf_corner_lattice(tree, leaf)
        vals, ok = field.lookup(corner_f)
        if not ok.all():
            continue
        case = int(((vals < 0) * (1 << np.arange(8))).sum())
        if case in (0, 255):
            continue
        k, p = _SeamCell(tree, field, leaf, faces, edges).triangles(case, vals)
        if len(k):
            parts_keys.setdefault(leaf.code, []).append(k)
            parts_pos.setdefault(leaf.code, []).append(p)

    for leaf in leaves:
        if leaf.code in parts_keys:
            keys = np.concatenate(parts_keys[leaf.code])
            pos = np.concatenate(parts_pos[leaf.code])
            good = (keys[:, 0] != keys[:, 1]) & (keys[:, 1] != keys[:, 2]) & (keys[:, 0] != keys[:, 2])
            out[leaf.code] = LeafTriangles(keys[good], pos[good])
        else:
            out[leaf.code] = LeafTriangles(np.zeros((0, 3), np.int64), np.zeros((0, 3, 3)))
    return out


def _needed_lattice(tree, leaf, neighbor_levels=None, fine_grids=None) -> np.ndarray:
    f = leaf_corner_lattice(tree, leaf)
    if leaf.level < tree.l_max and _fine_contacts(tree, leaf, neighbor_levels, fine_grids)[1]:
        f = np.concatenate([f, leaf_corner_lattice(tree, leaf, tree.l_max)])
    return f


def build_field(tree: HybridVoxelOctree, leaves: list[LeafVoxel], neighbor_levels=None,
                fine_grids=None) -> LatticeField:
    """Sample every lattice point the given leaves need.

    Points already used by an extracted leaf outside ``leaves`` keep their
    frozen values, so seams with earlier partial meshes line up.
    """
    _check_lattice(tree)
    field = LatticeField(tree)
    active = {l.code for l in leaves}
    frozen_codes = set()
    for leaf in leaves:
        for c in tree.neighbor_codes(leaf.code):
            nb = tree.leaves.get(c)
            if c not in active and nb is not None and nb.lattice is not None:
                frozen_codes.add(c)
    for c in sorted(frozen_codes):
        field.add(*tree.leaves[c].lattice)
    if neighbor_levels is None and fine_grids is None:
        fine_grids = _fine_grids(tree)
    need = [_needed_lattice(tree, l, neighbor_levels, fine_grids) for l in leaves]
    if need:
        field.ensure(np.concatenate(need))
    return field


def extract_leaf_mesh(tree: HybridVoxelOctree, leaf: LeafVoxel, neighbor_levels=None,
                      field: LatticeField | None = None) -> LeafTriangles:
    """Triangles of one leaf with their weld keys.

    ``neighbor_levels`` maps neighbour offsets ``(dx, dy, dz)`` to levels
    (None for absent leaves); by default the tree is consulted.
    """
    if field is None:
        field = build_field(tree, [leaf], neighbor_levels)
    else:
        field.ensure(_needed_lattice(tree, leaf, neighbor_levels))
    return mesh_leaves(tree, [leaf], field, neighbor_levels)[leaf.code]


def weld(tris: dict[int, LeafTriangles]) -> TriangleMesh:
    """One indexed mesh from per-leaf keyed triangles (leaf code order)."""
    codes = sorted(c for c, t in tris.items() if len(t.keys))
    if not codes:
        m = TriangleMesh.empty()
        m.keys = np.zeros(0, dtype=np.int64)
        m.face_owner = np.zeros(0, dtype=np.int64)
        return m
    keys = np.concatenate([tris[c].keys for c in codes])
    pos = np.concatenate([tris[c].positions for c in codes])
    owner = np.concatenate([np.full(len(tris[c].keys), c, dtype=np.int64) for c in codes])
    uk, first, inv = np.unique(keys.ravel(), return_index=True, return_inverse=True)
    verts = pos.reshape(-1, 3)[first]
    return TriangleMesh(verts, inv.reshape(-1, 3), keys=uk, face_owner=owner)


def extract_partial_mesh(tree: HybridVoxelOctree, dirty_codes=None) -> TriangleMesh:
    """Re-mesh the dirty leaves, store their triangles and clear the flags.

    Vertices whose key is also used by a clean, already extracted leaf are
    returned locked.
    """
    codes = tree.dirty_codes() if dirty_codes is None else sorted(dirty_codes)
    leaves = [tree.leaves[c] for c in codes if c in tree.leaves]
    if not leaves:
        return weld({})
    fine = _fine_grids(tree)
    field = build_field(tree, leaves, fine_grids=fine)
    tris = mesh_leaves(tree, leaves, field, fine_grids=fine)
    mesh = weld(tris)

    for leaf in leaves:
        f = _needed_lattice(tree, leaf, fine_grids=fine)
        keys = np.unique(pack_lattice(f))
        vals, ok = field.lookup(unpack_lattice(keys))
        leaf.lattice = (keys, vals, ok)
        cv, cok = field.lookup(leaf_corner_lattice(tree, leaf))
        leaf.corner_sdf = CornerGrid(leaf.level, cv, cok)
        leaf.face_keys = tris[leaf.code].keys
        leaf.dirty = False
        leaf.epoch += 1

    active = set(codes)
    shared = []
    for leaf in leaves:
        for c in tree.neighbor_codes(leaf.code):
            nb = tree.leaves.get(c)
            if c not in active and nb is not None and nb.face_keys is not None and len(nb.face_keys):
                shared.append(nb.face_keys.ravel())
    if shared and mesh.n_vertices:
        mesh.locked = np.isin(mesh.keys, np.concatenate(shared))
    if mesh.n_vertices:
        mesh.vertex_normals = vertex_normals(mesh.vertices, mesh.faces)
        mesh.vertex_colors = nearest_colors(tree, mesh.vertices)
    return mesh


def nearest_colors(tree: HybridVoxelOctree, pts: np.ndarray, default: float = 0.5) -> np.ndarray:
    idx, _ = tree.query_nearest(pts, 2 * tree.leaf_edge)
    out = np.full((len(pts), 3), default)
    ok = idx >= 0
    out[ok] = tree.point_index().colors[idx[ok]]
    return out
