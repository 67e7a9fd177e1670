"""Deferred shading with first-order SH lighting and its analytic gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Frame, Pose
from .kernels import rasterize_faces
from .mesh import TriangleMesh, scatter_faces
from .refine_point import GeometricObjective, LossWeights, OptState, RefineResult, TraceRow, sample_surface, MAX_SAMPLES

log = logging.getLogger(__name__)

LR_VERTICES = 1e-4
LR_ALBEDO = 1e-2
LR_SH = 1e-3


@dataclass
class ShadingModel:
    sh: np.ndarray  # (4,) ambient + linear terms, shared by all channels
    albedo: np.ndarray  # (n, 3)
    beta: float = 0.0

    def __post_init__(self):
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(4)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        if self.beta != 0.0:
            raise ValueError("beta is fixed at zero")

    @classmethod
    def neutral(cls, n_vertices: int, albedo: float = 0.5, ambient: float = 0.5) -> "ShadingModel":
        return cls(np.array([ambient, 0.0, 0.0, 0.0]), np.full((n_vertices, 3), albedo))

    def copy(self) -> "ShadingModel":
        return ShadingModel(self.sh.copy(), self.albedo.copy())


def sh_basis(n: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ones(n.shape[:-1] + (1,)), n], axis=-1)


def irradiance(n: np.ndarray, sh: np.ndarray) -> np.ndarray:
    return sh_basis(n) @ np.asarray(sh, dtype=np.float64)


@dataclass
class RasterBuffer:
    face_id: np.ndarray  # (h, w), -1 for background
    bary: np.ndarray  # (h, w, 3)
    depth: np.ndarray  # (h, w), inf for background

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def rasterize(mesh: TriangleMesh, pose: Pose, intr: CameraIntrinsics) -> RasterBuffer:
    cam = (mesh.vertices - pose.translation) @ pose.rotation
    fid, bary, depth = rasterize_faces(cam, mesh.faces, intr.fx, intr.fy, intr.cx, intr.cy,
                                       intr.height, intr.width)
    return RasterBuffer(fid, bary, depth)


@dataclass
class _Pixels:
    """Covered pixels of one buffer, flattened."""

    yx: tuple[np.ndarray, np.ndarray]
    faces: np.ndarray  # (p, 3) vertex ids
    bary: np.ndarray  # (p, 3)


def _pixels(buf: RasterBuffer, mesh: TriangleMesh) -> _Pixels:
    yy, xx = np.nonzero(buf.covered)
    return _Pixels((yy, xx), mesh.faces[buf.face_id[yy, xx]], buf.bary[yy, xx])


def _interp(px: _Pixels, attr: np.ndarray) -> np.ndarray:
    return np.einsum("pk,pkj->pj", px.bary, attr[px.faces])


def shade(buf: RasterBuffer, mesh: TriangleMesh, model: ShadingModel) -> np.ndarray:
    """Rendered RGB image; background is black."""
    if mesh.vertex_normals is None:
        raise ValueError("mesh needs vertex normals")
    h, w = buf.face_id.shape
    img = np.zeros((h, w, 3))
    px = _pixels(buf, mesh)
    if len(px.faces) == 0:
        return img
    n = _interp(px, mesh.vertex_normals)
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    s = irradiance(n, model.sh)
    img[px.yx] = np.clip(_interp(px, model.albedo) * s[:, None], 0.0, 1.0)
    return img


def _normals_raw(V, F):
    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    c = np.cross(e1, e2)
    return e1, e2, scatter_faces(F, (c, c, c), len(V))


def _normal_backprop(V, F, gN):
    """Vertex-position gradient from a gradient on the area-weighted,
    normalised vertex normals."""
    e1, e2, a = _normals_raw(V, F)
    la = np.linalg.norm(a, axis=1, keepdims=True)
    N = np.divide(a, la, out=np.zeros_like(a), where=la > 0)
    ga = np.divide(gN - np.einsum("ij,ij->i", gN, N)[:, None] * N, la, out=np.zeros_like(gN),
                   where=la > 0)
    gc = ga[F[:, 0]] + ga[F[:, 1]] + ga[F[:, 2]]
    g1 = np.cross(e2, gc)
    g2 = np.cross(gc, e1)
    return scatter_faces(F, (-(g1 + g2), g1, g2), len(V))


@dataclass
class ShadingGrad:
    loss: float
    albedo: np.ndarray
    sh: np.ndarray
    vertices: np.ndarray
    covered: int


def shading_loss_grad(mesh: TriangleMesh, model: ShadingModel, frames, buffers=None) -> ShadingGrad:
    """Mean per-pixel squared RGB residual over all covered pixels.

    Vertex gradients flow only through the vertex normals; coverage and
    barycentrics are held fixed (pass ``buffers`` to reuse rasters).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    V, F = mesh.vertices, mesh.faces
    _, _, a = _normals_raw(V, F)
    la = np.linalg.norm(a, axis=1, keepdims=True)
    N = np.divide(a, la, out=np.zeros_like(a), where=la > 0)
    if buffers is None:
        buffers = [rasterize(mesh, fr.pose, fr.intrinsics) for fr in frames]
    pix = [_pixels(b, mesh) for b in buffers]
    total = sum(len(p.faces) for p in pix)
    if total == 0:
        raise ValueError("mesh not visible")
    loss = 0.0
    g_rho = np.zeros_like(model.albedo)
    g_l = np.zeros(4)
    g_N = np.zeros_like(V)
    for fr, px in zip(frames, pix):
        if len(px.faces) == 0:
            continue
        n_raw = _interp(px, N)
        ln = np.linalg.norm(n_raw, axis=1, keepdims=True)
        n = np.divide(n_raw, ln, out=np.zeros_like(n_raw), where=ln > 0)
        basis = sh_basis(n)
        s = basis @ model.sh
        rho = _interp(px, model.albedo)
        raw = rho * s[:, None]
        out = np.clip(raw, 0.0, 1.0)
        target = np.asarray(fr.color, dtype=np.float64)[px.yx][:, :3]
        r = out - target
        loss += float(np.sum(r * r))
        gB = 2.0 * r * ((raw > 0) & (raw < 1)) / total
        g_rho_px = gB * s[:, None]
        g_rho += scatter_faces(px.faces, [px.bary[:, k, None] * g_rho_px for k in range(3)], len(g_rho))
        gS = np.sum(gB * rho, axis=1)
        g_l += gS @ basis
        gn = gS[:, None] * model.sh[1:][None, :]
        gn_raw = np.divide(gn - np.einsum("ij,ij->i", gn, n)[:, None] * n, ln,
                           out=np.zeros_like(gn), where=ln > 0)
        g_N += scatter_faces(px.faces, [px.bary[:, k, None] * gn_raw for k in range(3)], len(g_N))
    g_V = _normal_backprop(V, F, g_N)
    return ShadingGrad(loss / total, g_rho, g_l, g_V, total)


@dataclass
class ShadingOptimizers:
    vertices: OptState = field(default_factory=lambda: OptState(LR_VERTICES))
    albedo: OptState = field(default_factory=lambda: OptState(LR_ALBEDO))
    sh: OptState = field(default_factory=lambda: OptState(LR_SH))


@dataclass
class ShadingResult(RefineResult):
    model: ShadingModel | None = None


def refine_shading(mesh: TriangleMesh, frames, model: ShadingModel | None = None,
                   opt: ShadingOptimizers | None = None, iters: int = 300, *, warmup: int = 0,
                   X=None, weights: LossWeights | None = None, seed: int = 0,
                   move_vertices: bool = True, raster_every: int = 1) -> ShadingResult:
    """Joint optimisation of albedo, SH lighting and (optionally) vertices.

    The first ``warmup`` iterations update the lighting only.  With a
    supervision cloud ``X`` the geometric loss is added and its vertex
    gradient summed with the shading one.
    """
    frames = list(frames)
    out = mesh.copy()
    model = ShadingModel.neutral(mesh.n_vertices) if model is None else model.copy()
    if len(model.albedo) != mesh.n_vertices:
        raise ValueError("albedo count does not match the mesh")
    total_iters = warmup + iters
    if total_iters <= 0 or not frames:
        out.vertex_albedo = model.albedo.copy()
        return ShadingResult(out, [], None, model)
    opt = ShadingOptimizers() if opt is None else opt
    geo = GeometricObjective(mesh, X, weights) if X is not None else None
    n_samples = min(len(geo.x), MAX_SAMPLES) if geo is not None else 0
    rng = np.random.default_rng(seed)
    free = ~out.locked
    base = mesh.vertices.copy()
    offset = np.zeros_like(base)
    trace: list[TraceRow] = []
    buffers = None
    error = None
    for it in range(total_iters):
        cur = TriangleMesh(base + offset, out.faces, locked=out.locked)
        if buffers is None or it % max(raster_every, 1) == 0:
            buffers = [rasterize(cur, fr.pose, fr.intrinsics) for fr in frames]
        g = shading_loss_grad(cur, model, frames, buffers)
        row = TraceRow(it, shading=g.loss)
        grad_v = g.vertices
        if geo is not None:
            samples = sample_surface(cur, n_samples, rng=rng)
            grad_v = grad_v + geo(cur, samples, row)
        else:
            row.total = g.loss
        if not (np.isfinite(row.total) and np.all(np.isfinite(grad_v))
                and np.all(np.isfinite(g.albedo)) and np.all(np.isfinite(g.sh))):
            error = f"non-finite loss at iteration {it}"
            log.warning(error)
            break
        trace.append(row)
        model.sh = opt.sh.update(model.sh, g.sh)
        if it >= warmup:
            model.albedo = np.maximum(opt.albedo.update(model.albedo, g.albedo), 0.0)
            if move_vertices:
                offset = opt.vertices.update(offset, grad_v, free)
    out.vertices = base + offset
    out.compute_vertex_normals()
    out.vertex_albedo = model.albedo.copy()
    return ShadingResult(out, trace, error, model)
