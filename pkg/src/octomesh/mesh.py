"""Indexed triangle mesh and topology helpers."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    vertex_colors: np.ndarray | None = None
    vertex_albedo: np.ndarray | None = None
    locked: np.ndarray | None = None
    # welding keys and owning leaf codes, present on extracted meshes
    keys: np.ndarray | None = None
    face_owner: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.locked is None:
            self.locked = np.zeros(n, dtype=bool)
        self.locked = np.asarray(self.locked, dtype=bool)
        for name in ("vertex_normals", "vertex_colors", "vertex_albedo", "locked", "keys"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} rows for {n} vertices")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face with repeated vertex index")
        if self.face_owner is not None and len(self.face_owner) != len(self.faces):
            raise ValueError("face_owner length mismatch")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else np.array(v, copy=True)
        return TriangleMesh(**kw)

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalize:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def compute_vertex_normals(self) -> np.ndarray:
        self.vertex_normals = vertex_normals(self.vertices, self.faces)
        return self.vertex_normals

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)


def scatter_add(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Row sums of ``values`` grouped by ``index`` into an ``(n, d)`` array."""
    index = np.asarray(index).ravel()
    values = np.asarray(values, dtype=np.float64).reshape(len(index), -1)
    out = np.empty((n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n)
    return out


def scatter_faces(faces: np.ndarray, per_corner, n: int) -> np.ndarray:
    """Accumulate per-face-corner vectors onto vertices.

    ``per_corner`` is a sequence of three ``(m, d)`` arrays, one per corner.
    """
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    return scatter_add(idx, np.concatenate(list(per_corner)), n)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, normalised."""
    v = vertices[faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    acc = scatter_faces(faces, (fn, fn, fn), len(vertices))
    ln = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, ln, out=np.zeros_like(acc), where=ln > 0)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted ``(i, j)`` pairs with ``i < j`` for every edge of ``faces``."""
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_face_pairs(faces: np.ndarray) -> np.ndarray:
    """Unordered pairs of faces sharing an edge, ``(p, 2)``.

    An edge shared by ``k`` faces contributes all ``k*(k-1)/2`` pairs.
    """
    m = len(faces)
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    fid = np.tile(np.arange(m), 3)
    order = np.lexsort((fid, e[:, 1], e[:, 0]))
    e, fid = e[order], fid[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    pairs = [np.stack([fid[:-1][same], fid[1:][same]], axis=1)]
    # edges with more than two faces: also pair non-consecutive members
    gap = 2
    while True:
        if len(e) <= gap:
            break
        s = np.all(e[gap:] == e[:-gap], axis=1)
        if not s.any():
            break
        pairs.append(np.stack([fid[:-gap][s], fid[gap:][s]], axis=1))
        gap += 1
    return np.concatenate(pairs)


def edge_face_counts(faces: np.ndarray):
    """Unique edges and how many faces use each."""
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def vertex_neighbors(n: int, faces: np.ndarray):
    """CSR-style adjacency ``(indptr, indices)`` of the edge graph."""
    e = unique_edges(faces)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    return np.cumsum(indptr), both[:, 1]


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop vertices that no face references."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    remap = np.cumsum(used) - 1
    pick = lambda a: None if a is None else a[used]
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces], pick(mesh.vertex_normals),
                        pick(mesh.vertex_colors), pick(mesh.vertex_albedo), pick(mesh.locked),
                        pick(mesh.keys), mesh.face_owner)
