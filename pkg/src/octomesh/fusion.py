"""Merging keyed partial meshes into one global mesh."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh

LOCK_TOLERANCE = 1e-9


class ConsistencyError(RuntimeError):
    """A locked seam vertex moved between extraction and merge."""


def _lookup(sorted_keys: np.ndarray, order: np.ndarray, q: np.ndarray):
    """Index of each query key in an unsorted key array, -1 when absent."""
    if len(sorted_keys) == 0:
        return np.full(len(q), -1, dtype=np.int64)
    i = np.minimum(np.searchsorted(sorted_keys, q), len(sorted_keys) - 1)
    hit = sorted_keys[i] == q
    return np.where(hit, order[i], -1)


@dataclass
class GlobalMesh:
    """Global mesh whose vertices are identified by weld keys and whose faces
    are owned by octree leaves."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    albedo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    face_owner: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def _index(self):
        order = np.argsort(self.keys, kind="stable")
        return self.keys[order], order

    def key_to_index(self, keys) -> np.ndarray:
        sk, order = self._index()
        return _lookup(sk, order, np.asarray(keys, dtype=np.int64))

    def shared_keys(self, partial: TriangleMesh) -> np.ndarray:
        """Mask of partial vertices used by global faces of leaves that the
        partial does not re-extract."""
        _require_keys(partial)
        mine = np.unique(partial.face_owner) if partial.face_owner is not None else np.zeros(0)
        other = ~np.isin(self.face_owner, mine)
        used = np.unique(self.faces[other].ravel())
        return np.isin(partial.keys, self.keys[used])

    def to_mesh(self) -> TriangleMesh:
        m = TriangleMesh(self.vertices.copy(), self.faces.copy(), self.normals.copy(),
                         self.colors.copy(), self.albedo.copy(), keys=self.keys.copy(),
                         face_owner=self.face_owner.copy())
        return m


def _require_keys(mesh: TriangleMesh) -> None:
    if mesh.keys is None or mesh.face_owner is None:
        raise ValueError("partial mesh needs weld keys and face owners")


def lock_shared_boundary(partial: TriangleMesh, global_mesh: GlobalMesh) -> TriangleMesh:
    """Copy of ``partial`` whose seam vertices take their global position and
    are locked against refinement."""
    out = partial.copy()
    if global_mesh.n_faces == 0 or partial.n_vertices == 0:
        return out
    shared = global_mesh.shared_keys(partial)
    if shared.any():
        gi = global_mesh.key_to_index(partial.keys[shared])
        out.vertices[shared] = global_mesh.vertices[gi]
        out.locked = out.locked | shared
    return out


def _attr(mesh: TriangleMesh, name: str, default: float) -> np.ndarray:
    v = getattr(mesh, name)
    return np.full((mesh.n_vertices, 3), default) if v is None else np.asarray(v, dtype=np.float64)


def merge_partial(global_mesh: GlobalMesh, partial: TriangleMesh) -> GlobalMesh:
    """Add a refined partial mesh.

    Faces of every leaf the partial owns replace that leaf's earlier faces.
    Seam vertices keep their global position and attributes; a locked one
    that moved raises :class:`ConsistencyError`.  Vertices no face uses any
    more are dropped.
    """
    _require_keys(partial)
    g = global_mesh
    if partial.n_vertices == 0:
        return g
    shared = g.shared_keys(partial) if g.n_faces else np.zeros(partial.n_vertices, bool)
    gi = g.key_to_index(partial.keys)
    if shared.any():
        moved = np.abs(partial.vertices[shared] - g.vertices[gi[shared]]).max(axis=1) > LOCK_TOLERANCE
        bad = partial.locked[shared] & moved
        if bad.any():
            raise ConsistencyError(f"{int(bad.sum())} locked seam vertices moved")

    owners = np.unique(partial.face_owner)
    keep_faces = ~np.isin(g.face_owner, owners)

    verts = g.vertices.copy()
    normals, colors, albedo = g.normals.copy(), g.colors.copy(), g.albedo.copy()
    p_norm = _attr(partial, "vertex_normals", 0.0)
    p_col = _attr(partial, "vertex_colors", 0.5)
    p_alb = _attr(partial, "vertex_albedo", 0.5)
    # keys present but not shared belong only to re-extracted leaves: overwrite
    upd = (gi >= 0) & ~shared
    verts[gi[upd]] = partial.vertices[upd]
    normals[gi[upd]], colors[gi[upd]], albedo[gi[upd]] = p_norm[upd], p_col[upd], p_alb[upd]
    new = gi < 0
    idx = gi.copy()
    idx[new] = len(verts) + np.arange(int(new.sum()))
    verts = np.concatenate([verts, partial.vertices[new]])
    normals = np.concatenate([normals, p_norm[new]])
    colors = np.concatenate([colors, p_col[new]])
    albedo = np.concatenate([albedo, p_alb[new]])
    keys = np.concatenate([g.keys, partial.keys[new]])

    faces = np.concatenate([g.faces[keep_faces], idx[partial.faces]])
    owner = np.concatenate([g.face_owner[keep_faces], partial.face_owner])

    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    return GlobalMesh(verts[used], normals[used], colors[used], albedo[used], keys[used],
                      remap[faces], owner)


def write_manifest(path, records: list[dict], extra: dict | None = None) -> None:
    body = {"partials": records}
    if extra:
        body.update(extra)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
