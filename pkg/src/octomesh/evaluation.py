"""Reconstruction metrics and analytic test scenes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Frame, PointCloud, Pose, look_at
from .mesh import TriangleMesh
from .shading import irradiance

PSNR_CAP_DB = 99.0


# -- metrics ------------------------------------------------------------------

def sample_mesh(mesh: TriangleMesh, density: float = 1.0, seed: int = 0) -> PointCloud:
    """Random surface points at ``density`` points per cm^2 (Poisson count),
    each carrying its face normal."""
    if density < 0:
        raise ValueError("density must be nonnegative")
    if density == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    areas = mesh.face_areas() if mesh.n_faces else np.zeros(0)
    total = float(areas.sum())
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero area")
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(total * density * 1e4))
    cdf = np.cumsum(areas)
    face = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), mesh.n_faces - 1)
    u, v = rng.random(n), rng.random(n)
    fold = u + v > 1
    u[fold], v[fold] = 1 - u[fold], 1 - v[fold]
    tri = mesh.vertices[mesh.faces[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    normals = mesh.face_normals(normalize=True)[face]
    return PointCloud(pts, normals)


def _positions(c) -> np.ndarray:
    return c.positions if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


def _nn_dist(src: np.ndarray, dst: np.ndarray):
    return cKDTree(dst).query(src, k=1)


def accuracy(recon, gt) -> float:
    """Mean distance from each reconstructed point to the ground truth, in cm."""
    r, g = _positions(recon), _positions(gt)
    if len(r) == 0 or len(g) == 0:
        raise ValueError("accuracy needs nonempty clouds")
    d, _ = _nn_dist(r, g)
    return float(d.mean() * 100.0)


def completeness(recon, gt) -> float:
    return accuracy(gt, recon)


def normal_consistency(recon: PointCloud, gt: PointCloud) -> float:
    """Mean absolute normal agreement of nearest-neighbour pairs, averaged
    over both directions."""
    if recon.normals is None or gt.normals is None:
        raise ValueError("normal consistency needs normals on both clouds")
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("normal consistency needs nonempty clouds")
    _, i = _nn_dist(recon.positions, gt.positions)
    a = np.abs(np.einsum("ij,ij->i", recon.normals, gt.normals[i])).mean()
    _, j = _nn_dist(gt.positions, recon.positions)
    b = np.abs(np.einsum("ij,ij->i", gt.normals, recon.normals[j])).mean()
    return float(np.clip(0.5 * (a + b), 0.0, 1.0))


def precision_recall(recon, gt, tau: float = 0.05) -> tuple[float, float]:
    r, g = _positions(recon), _positions(gt)
    if len(r) == 0 or len(g) == 0:
        raise ValueError("F-score needs nonempty clouds")
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_rg, _ = _nn_dist(r, g)
    d_gr, _ = _nn_dist(g, r)
    return float(np.mean(d_rg <= tau)), float(np.mean(d_gr <= tau))


def f_score(recon, gt, tau: float = 0.05) -> float:
    p, r = precision_recall(recon, gt, tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR in dB for images in [0, 1]; optional pixel mask. Capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        a, b = a[mask], b[mask]
    if a.size == 0:
        raise ValueError("no pixels to compare")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


@dataclass
class MetricsReport:
    accuracy_cm: float
    normal_consistency: float
    f_score: float
    psnr_db: float | None = None
    completeness_cm: float | None = None
    n_recon: int = 0
    n_gt: int = 0
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def evaluate(recon: PointCloud, gt: PointCloud, tau: float = 0.05, **params) -> MetricsReport:
    return MetricsReport(
        accuracy_cm=accuracy(recon, gt),
        normal_consistency=normal_consistency(recon, gt),
        f_score=f_score(recon, gt, tau),
        completeness_cm=completeness(recon, gt),
        n_recon=len(recon), n_gt=len(gt), params={"tau": tau, **params})


def evaluate_mesh(mesh: TriangleMesh, gt: PointCloud, tau: float = 0.05, density: float = 1.0,
                  seed: int = 0) -> MetricsReport:
    recon = sample_mesh(mesh, density, seed)
    return evaluate(recon, gt, tau, density=density, seed=seed)


# -- analytic scenes ----------------------------------------------------------

@dataclass
class Plane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    albedo: tuple = (0.6, 0.6, 0.6)
    size: float = 2.0  # side of the square patch used for ground-truth sampling

    def sdf(self, p):
        n = np.asarray(self.normal, float) / np.linalg.norm(self.normal)
        return (p - np.asarray(self.point, float)) @ n

    def grad(self, p):
        n = np.asarray(self.normal, float) / np.linalg.norm(self.normal)
        return np.broadcast_to(n, p.shape).copy()

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        nrm = np.asarray(self.normal, float) / np.linalg.norm(self.normal)
        a = np.cross(nrm, [1.0, 0, 0] if abs(nrm[0]) < 0.9 else [0, 1.0, 0])
        a /= np.linalg.norm(a)
        b = np.cross(nrm, a)
        uv = (rng.random((n, 2)) - 0.5) * self.size
        pts = np.asarray(self.point, float) + uv[:, :1] * a + uv[:, 1:] * b
        return pts, np.broadcast_to(nrm, pts.shape).copy()

    def area(self) -> float:
        return self.size ** 2


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    albedo: tuple = (0.6, 0.6, 0.6)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center, float), axis=-1) - self.radius

    def grad(self, p):
        d = p - np.asarray(self.center, float)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def sample(self, n: int, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center, float) + self.radius * d, d

    def area(self) -> float:
        return 4 * np.pi * self.radius ** 2


@dataclass
class BoxRoom:
    """Inside of an axis-aligned box; the free space is the interior."""

    lo: tuple = (-1.5, -1.5, 0.0)
    hi: tuple = (1.5, 1.5, 2.5)
    albedo: tuple = (0.6, 0.6, 0.6)
    wall_albedo: dict | None = None  # wall index (2 * axis + side) -> rgb

    def _inside_dist(self, p):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        return np.minimum(p - lo, hi - p)  # (.., 3) distance to each slab wall

    def sdf(self, p):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        c, h = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(p - c) - h
        box = np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)
        return -box

    def wall(self, p):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        d = np.concatenate([p - lo, hi - p], axis=-1)  # walls: 0..2 low, 3..5 high
        k = np.argmin(np.abs(d), axis=-1)
        axis, side = k % 3, k // 3
        return axis, side

    def grad(self, p):
        axis, side = self.wall(p)
        n = np.zeros(p.shape)
        idx = np.arange(len(p)) if p.ndim == 2 else None
        n[idx, axis] = np.where(side == 0, 1.0, -1.0)
        return n

    def albedo_at(self, p):
        out = np.broadcast_to(np.asarray(self.albedo, float), p.shape).copy()
        if self.wall_albedo:
            axis, side = self.wall(p)
            wid = 2 * axis + side
            for w, rgb in self.wall_albedo.items():
                out[wid == w] = rgb
        return out

    def sample(self, n: int, rng):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        ext = hi - lo
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
        wall = np.searchsorted(np.cumsum(areas), rng.random(n) * areas.sum(), side="right")
        wall = np.minimum(wall, 5)
        pts = lo + rng.random((n, 3)) * ext
        axis = wall % 3
        high = wall >= 3
        pts[np.arange(n), axis] = np.where(high, hi[axis], lo[axis])
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = np.where(high, -1.0, 1.0)
        return pts, nrm

    def area(self) -> float:
        e = np.asarray(self.hi, float) - np.asarray(self.lo, float)
        return float(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))


@dataclass
class SyntheticScene:
    """Union of analytic primitives lit by first-order SH lighting."""

    primitives: list
    sh: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.1, -0.15, 0.25]))

    def sdf(self, p):
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([s.sdf(p) for s in self.primitives]), axis=0)

    def closest_primitive(self, p):
        return np.argmin(np.stack([np.abs(s.sdf(p)) for s in self.primitives]), axis=0)

    def normal(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        k = self.closest_primitive(p)
        out = np.zeros_like(p)
        for i, s in enumerate(self.primitives):
            m = k == i
            if m.any():
                out[m] = s.grad(p[m])
        return out

    def albedo(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        k = self.closest_primitive(p)
        out = np.zeros_like(p)
        for i, s in enumerate(self.primitives):
            m = k == i
            if m.any():
                out[m] = s.albedo_at(p[m]) if hasattr(s, "albedo_at") else s.albedo
        return out

    def area(self) -> float:
        return float(sum(s.area() for s in self.primitives))

    def sample(self, density: float = 1.0, seed: int = 0) -> PointCloud:
        """Ground-truth surface points (``density`` per cm^2) with normals;
        points hidden inside another primitive are dropped."""
        rng = np.random.default_rng(seed)
        pos, nrm = [], []
        for s in self.primitives:
            n = int(rng.poisson(s.area() * density * 1e4))
            p, q = s.sample(n, rng)
            pos.append(p)
            nrm.append(q)
        pos, nrm = np.concatenate(pos), np.concatenate(nrm)
        if len(self.primitives) > 1:
            keep = np.abs(self.sdf(pos)) < 1e-9
            pos, nrm = pos[keep], nrm[keep]
        return PointCloud(pos, nrm)


def sphere_trace(scene: SyntheticScene, origins, dirs, t_max: float = 20.0, eps: float = 1e-7,
                 max_steps: int = 512):
    """Distance along each unit ray to the first hit; ``inf`` on a miss."""
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        d = scene.sdf(origins[idx] + t[idx, None] * dirs[idx])
        d_abs = np.abs(d)
        done = d_abs < eps
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d_abs)
        gone = t[idx] > t_max
        active[idx[done | gone]] = False
    t[~hit] = np.inf
    return t


def render_scene(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics, sh=None,
                 index: int = 0) -> Frame:
    """Depth (camera z, 0 on a miss) and Lambertian colour of the scene."""
    sh = scene.sh if sh is None else np.asarray(sh, dtype=np.float64)
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, float)],
                     axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / norm[:, None]) @ pose.rotation.T
    t = sphere_trace(scene, pose.translation, dirs)
    hit = np.isfinite(t)
    depth = np.zeros(len(t))
    depth[hit] = t[hit] / norm[hit]
    color = np.zeros((len(t), 3))
    if hit.any():
        p = pose.translation + t[hit, None] * dirs[hit]
        n = scene.normal(p)
        color[hit] = np.clip(scene.albedo(p) * irradiance(n, sh)[:, None], 0.0, 1.0)
    h, w = intr.height, intr.width
    return Frame(color.reshape(h, w, 3), depth.reshape(h, w), pose, intr, index)


# -- stock scenes and camera paths ---------------------------------------------

SCENES = ("sphere", "plane", "room")


def make_scene(name: str) -> SyntheticScene:
    if name == "sphere":
        return SyntheticScene([Sphere((0.0, 0.0, 0.0), 1.0)])
    if name == "plane":
        return SyntheticScene([Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), size=2.0)])
    if name == "room":
        walls = {0: (0.7, 0.5, 0.4), 1: (0.5, 0.6, 0.7), 2: (0.6, 0.6, 0.5),
                 3: (0.4, 0.6, 0.5), 4: (0.7, 0.7, 0.7), 5: (0.5, 0.5, 0.6)}
        return SyntheticScene([BoxRoom((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0), wall_albedo=walls)])
    raise ValueError(f"unknown scene {name!r}; choose from {SCENES}")


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    f = 0.8 * width
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height, 5000.0)


def camera_path(name: str, frames: int) -> list[Pose]:
    """Orbit around the object scenes; a slow pan inside the room."""
    poses = []
    for i in range(frames):
        a = 2 * np.pi * i / max(frames, 1)
        if name == "sphere":
            eye = (3.0 * np.cos(a), 3.0 * np.sin(a), 0.8 * np.sin(3 * a))
            poses.append(look_at(eye, (0.0, 0.0, 0.0)))
        elif name == "plane":
            eye = (0.6 * np.cos(a), 0.6 * np.sin(a), 2.0)
            poses.append(look_at(eye, (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)))
        elif name == "room":
            eye = (0.15 * np.cos(a), 0.15 * np.sin(a), 1.0)
            target = (eye[0] + np.cos(a + 0.3), eye[1] + np.sin(a + 0.3), 0.9 + 0.3 * np.sin(2 * a))
            poses.append(look_at(eye, target))
        else:
            raise ValueError(f"unknown scene {name!r}")
    return poses


def render_sequence(name: str, frames: int, intr: CameraIntrinsics | None = None) -> list[Frame]:
    scene = make_scene(name)
    intr = default_intrinsics() if intr is None else intr
    return [render_scene(scene, p, intr, index=i) for i, p in enumerate(camera_path(name, frames))]


# -- reference meshes ------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9],
                  [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2],
                  [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10],
                  [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        ue, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[ue[:, 0]] + v[ue[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        v = np.concatenate([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    mesh = TriangleMesh(np.asarray(center, float) + radius * v, f)
    mesh.compute_vertex_normals()
    return mesh


def grid_mesh(origin, du, dv, nu: int, nv: int) -> TriangleMesh:
    """Regular grid over the parallelogram ``origin + s*du + t*dv``; faces
    wind so that the normal is ``du x dv``."""
    s, t = np.meshgrid(np.linspace(0, 1, nu + 1), np.linspace(0, 1, nv + 1))
    pts = (np.asarray(origin, float) + s.ravel()[:, None] * np.asarray(du, float)
           + t.ravel()[:, None] * np.asarray(dv, float))
    faces = []
    for j in range(nv):
        for i in range(nu):
            a = j * (nu + 1) + i
            b, c, d = a + 1, a + nu + 1, a + nu + 2
            faces += [(a, b, d), (a, d, c)]
    mesh = TriangleMesh(pts, np.array(faces))
    mesh.compute_vertex_normals()
    return mesh


def box_room_mesh(room: BoxRoom, res: float = 0.1) -> TriangleMesh:
    """Six inward-facing wall grids, not welded along the room edges."""
    lo, hi = np.asarray(room.lo, float), np.asarray(room.hi, float)
    parts = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, 1):
            o = lo.copy()
            o[axis] = hi[axis] if side else lo[axis]
            du = np.zeros(3)
            dv = np.zeros(3)
            du[b] = hi[b] - lo[b]
            dv[c] = hi[c] - lo[c]
            if side:  # flip winding so the normal points inwards
                du, dv = dv, du
            nu = max(1, int(round(np.linalg.norm(du) / res)))
            nv = max(1, int(round(np.linalg.norm(dv) / res)))
            parts.append(grid_mesh(o, du, dv, nu, nv))
    verts, faces, off = [], [], 0
    for p in parts:
        verts.append(p.vertices)
        faces.append(p.faces + off)
        off += p.n_vertices
    mesh = TriangleMesh(np.concatenate(verts), np.concatenate(faces))
    mesh.compute_vertex_normals()
    return mesh
