"""Point-based mesh refinement: Chamfer fitting plus smoothness regularizers,
with analytic gradients and an Adam optimizer."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .mesh import TriangleMesh, edge_face_pairs, scatter_add, scatter_faces, unique_edges

log = logging.getLogger(__name__)

MAX_SAMPLES = 20000


@dataclass(frozen=True)
class SurfaceSample:
    face: int
    bary: tuple[float, float, float]
    position: np.ndarray


@dataclass
class SurfaceSamples:
    """Batch of surface samples; ``positions = sum_k bary[:, k] * V[faces[:, k]]``."""

    faces: np.ndarray  # (n,) face ids
    bary: np.ndarray  # (n, 3)
    positions: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return len(self.faces)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(int(self.faces[i]), tuple(float(b) for b in self.bary[i]), self.positions[i])

    def at(self, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        """Positions of the same samples on a deformed copy of the mesh."""
        tri = vertices[faces[self.faces]]
        return np.einsum("nk,nkj->nj", self.bary, tri)


@dataclass
class LossWeights:
    lap: float = 50.0
    normal: float = 1.0
    edge: float = 1.0

    def __post_init__(self):
        if min(self.lap, self.normal, self.edge) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Diagnostics:
    isolated_vertices: int = 0
    skipped_pairs: int = 0


def sample_surface(mesh: TriangleMesh, n: int, seed=0, rng=None) -> SurfaceSamples:
    """Area-weighted random points on the mesh.

    Each sample uses three uniforms: one picks the face by inverse CDF over
    face areas, two give the barycentrics (folded back into the simplex).
    ``rng`` may be any object with ``random(shape)``; otherwise ``seed``
    seeds a numpy generator.
    """
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    if n == 0:
        return SurfaceSamples(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)))
    if mesh.n_faces == 0:
        raise ValueError("degenerate mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("degenerate mesh")
    rng = np.random.default_rng(seed) if rng is None else rng
    r = np.asarray(rng.random((n, 3)), dtype=np.float64).reshape(n, 3)
    cdf = np.cumsum(areas)
    face = np.minimum(np.searchsorted(cdf, r[:, 0] * cdf[-1], side="right"), mesh.n_faces - 1)
    u, v = r[:, 1].copy(), r[:, 2].copy()
    fold = u + v > 1
    u[fold], v[fold] = 1 - u[fold], 1 - v[fold]
    bary = np.stack([1 - u - v, u, v], axis=1)
    s = SurfaceSamples(face, bary, np.zeros((n, 3)))
    s.positions = s.at(mesh.vertices, mesh.faces)
    return s


def _points(X) -> np.ndarray:
    return X.positions if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64).reshape(-1, 3)


def _nearest(tree: cKDTree, q: np.ndarray):
    d, i = tree.query(q, k=1)
    return d, i


def chamfer_loss_grad(samples: SurfaceSamples, X, mesh: TriangleMesh, x_tree: cKDTree | None = None):
    """Two-sided unsquared Chamfer distance between samples and ``X``.

    Gradient w.r.t. the mesh vertices, through the barycentric samples.
    Correspondences are fixed within the call.
    """
    xp = _points(X)
    if len(samples) == 0 or len(xp) == 0:
        raise ValueError("Chamfer distance needs nonempty point sets")
    y = samples.at(mesh.vertices, mesh.faces)
    x_tree = cKDTree(xp) if x_tree is None else x_tree
    d_xy, j = _nearest(cKDTree(y), xp)  # each x to nearest sample
    d_yx, i = _nearest(x_tree, y)  # each sample to nearest x
    loss = float(d_xy.sum() + d_yx.sum())

    diff = y[j] - xp
    g = scatter_add(j, np.divide(diff, d_xy[:, None], out=np.zeros_like(diff), where=d_xy[:, None] > 0),
                    len(y))
    diff = y - xp[i]
    g += np.divide(diff, d_yx[:, None], out=np.zeros_like(diff), where=d_yx[:, None] > 0)
    return loss, _scatter_samples(g, samples, mesh)


def _scatter_samples(g: np.ndarray, samples: SurfaceSamples, mesh: TriangleMesh) -> np.ndarray:
    fv = mesh.faces[samples.faces]
    return scatter_faces(fv, [samples.bary[:, k, None] * g for k in range(3)], len(mesh.vertices))


def uniform_laplacian(n: int, faces: np.ndarray):
    """Uniform graph Laplacian ``L = I - D^-1 A`` and the isolated-vertex mask."""
    e = unique_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(A.sum(axis=1)).ravel()
    isolated = deg == 0
    inv = np.divide(1.0, deg, out=np.zeros(n), where=~isolated)
    L = sp.diags((~isolated).astype(np.float64)) - sp.diags(inv) @ A
    return L.tocsr(), isolated


def laplacian_loss_grad(mesh: TriangleMesh, lam: float = 50.0, L=None, diag: Diagnostics | None = None):
    if L is None:
        L, isolated = uniform_laplacian(mesh.n_vertices, mesh.faces)
        if diag is not None:
            diag.isolated_vertices = int(isolated.sum())
    LV = L @ mesh.vertices
    loss = lam * float(np.sum(LV * LV))
    grad = 2.0 * lam * (L.T @ LV)
    return loss, np.asarray(grad)


def normal_consistency_loss_grad(mesh: TriangleMesh, lam: float = 1.0, pairs=None,
                                 diag: Diagnostics | None = None):
    """``lam * sum (1 - n_i . n_j)^2`` over face pairs sharing an edge."""
    V, F = mesh.vertices, mesh.faces
    pairs = edge_face_pairs(F) if pairs is None else pairs
    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    c = np.cross(e1, e2)
    ln = np.linalg.norm(c, axis=1)
    ok = ln > 1e-300
    keep = ok[pairs[:, 0]] & ok[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
    if diag is not None:
        diag.skipped_pairs = int((~keep).sum())
    pairs = pairs[keep]
    grad = np.zeros_like(V)
    if len(pairs) == 0:
        return 0.0, grad
    n = np.divide(c, ln[:, None], out=np.zeros_like(c), where=ok[:, None])
    a, b = pairs[:, 0], pairs[:, 1]
    r = 1.0 - np.einsum("ij,ij->i", n[a], n[b])
    loss = lam * float(np.sum(r * r))
    gn = scatter_add(np.concatenate([a, b]),
                     np.concatenate([-2.0 * lam * r[:, None] * n[b], -2.0 * lam * r[:, None] * n[a]]),
                     len(c))
    # through the normalisation n = c / |c|
    gc = np.divide(gn - np.einsum("ij,ij->i", gn, n)[:, None] * n, ln[:, None],
                   out=np.zeros_like(gn), where=ok[:, None])
    g1 = np.cross(e2, gc)
    g2 = np.cross(gc, e1)
    return loss, scatter_faces(F, (-(g1 + g2), g1, g2), len(V))


def edge_loss_grad(mesh: TriangleMesh, lam: float = 1.0, edges=None):
    """``lam * sqrt(sum of squared edge lengths)`` over unique edges."""
    V = mesh.vertices
    edges = unique_edges(mesh.faces) if edges is None else edges
    grad = np.zeros_like(V)
    if len(edges) == 0:
        raise ValueError("mesh has no edges")
    d = V[edges[:, 0]] - V[edges[:, 1]]
    s = float(np.sqrt(np.sum(d * d)))
    if s == 0:
        return 0.0, grad
    g = lam * d / s
    grad = scatter_add(np.concatenate([edges[:, 0], edges[:, 1]]), np.concatenate([g, -g]), len(V))
    return lam * s, grad


@dataclass
class OptState:
    """Adam moments for one parameter array."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def update(self, param: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """New parameter values after one step; rows where ``mask`` is False
        are returned unchanged."""
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        if self.m.shape != param.shape:
            raise ValueError("optimizer state does not match parameter shape")
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.step)
        vh = self.v / (1 - self.beta2 ** self.step)
        out = param - self.lr * mh / (np.sqrt(vh) + self.eps)
        if mask is not None:
            out[~mask] = param[~mask]
        return out


TRACE_FIELDS = ("iteration", "chamfer", "lap", "normal", "edge", "shading", "total")


@dataclass
class TraceRow:
    iteration: int
    chamfer: float = 0.0
    lap: float = 0.0
    normal: float = 0.0
    edge: float = 0.0
    shading: float = 0.0
    total: float = 0.0


@dataclass
class RefineResult:
    mesh: TriangleMesh
    trace: list[TraceRow] = field(default_factory=list)
    error: str | None = None


class GeometricObjective:
    """Chamfer plus regularizers, with topology-dependent data cached."""

    def __init__(self, mesh: TriangleMesh, X, weights: LossWeights | None = None):
        self.faces = mesh.faces
        self.weights = weights or LossWeights()
        self.x = _points(X)
        if len(self.x) == 0:
            raise ValueError("empty supervision cloud")
        self.x_tree = cKDTree(self.x)
        self.L, isolated = uniform_laplacian(mesh.n_vertices, mesh.faces)
        self.pairs = edge_face_pairs(mesh.faces)
        self.edges = unique_edges(mesh.faces)
        self.diag = Diagnostics(isolated_vertices=int(isolated.sum()))

    def __call__(self, mesh: TriangleMesh, samples: SurfaceSamples, row: TraceRow) -> np.ndarray:
        w = self.weights
        c, g = chamfer_loss_grad(samples, self.x, mesh, self.x_tree)
        l, gl = laplacian_loss_grad(mesh, w.lap, self.L)
        nl, gn = normal_consistency_loss_grad(mesh, w.normal, self.pairs, self.diag)
        el, ge = edge_loss_grad(mesh, w.edge, self.edges)
        row.chamfer, row.lap, row.normal, row.edge = c, l, nl, el
        row.total = c + l + nl + el + row.shading
        return g + gl + gn + ge


def refine(mesh: TriangleMesh, X, weights: LossWeights | None = None, opt: OptState | None = None,
           iters: int = 300, seed: int = 0, n_samples: int | None = None, extra=None) -> RefineResult:
    """Move unlocked vertices to fit ``X``; faces are never touched.

    ``extra(mesh, row)`` may add a loss term: it sets ``row.shading`` and
    returns a vertex gradient (or None).  Aborts on a non-finite loss and
    returns the last finite state.
    """
    out = mesh.copy()
    if iters <= 0:
        return RefineResult(out)
    if mesh.n_faces == 0:
        raise ValueError("cannot refine an empty mesh")
    opt = OptState() if opt is None else opt
    objective = GeometricObjective(mesh, X, weights)
    n = min(len(objective.x), MAX_SAMPLES) if n_samples is None else n_samples
    rng = np.random.default_rng(seed)
    free = ~out.locked
    base = mesh.vertices.copy()
    offset = np.zeros_like(base)
    trace: list[TraceRow] = []
    for it in range(iters):
        cur = TriangleMesh(base + offset, out.faces, locked=out.locked)
        samples = sample_surface(cur, n, rng=rng)
        row = TraceRow(it)
        g_extra = extra(cur, row) if extra is not None else None
        grad = objective(cur, samples, row)
        if g_extra is not None:
            grad = grad + g_extra
        if not (np.isfinite(row.total) and np.all(np.isfinite(grad))):
            msg = f"non-finite loss at iteration {it}"
            log.warning(msg)
            out.vertices = base + offset
            return RefineResult(_finish(out), trace, msg)
        trace.append(row)
        offset = opt.update(offset, grad, free)
    out.vertices = base + offset
    out.vertices[~free] = mesh.vertices[~free]
    return RefineResult(_finish(out), trace)


def _finish(mesh: TriangleMesh) -> TriangleMesh:
    if mesh.n_faces:
        mesh.compute_vertex_normals()
    return mesh


def write_trace_csv(path, rows, partial: int | None = None, append: bool = False) -> None:
    """Loss trace as CSV; with ``partial`` set, a leading partial-index column."""
    cols = (("partial",) if partial is not None else ()) + TRACE_FIELDS
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(cols)
        for r in rows:
            vals = [getattr(r, f) for f in TRACE_FIELDS]
            vals = [vals[0]] + [repr(float(v)) for v in vals[1:]]
            w.writerow(([partial] if partial is not None else []) + vals)
