"""Core geometric types and point-cloud preprocessing."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_MAX_DEPTH_M = 10.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at ``eye`` whose +z axis points at ``target``.

    Camera axes follow the usual pinhole convention: x right, y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    curvatures: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        for name in ("normals", "colors"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
                if len(v) != n:
                    raise ValueError(f"{name} has {len(v)} rows, expected {n}")
                setattr(self, name, v)
        if self.curvatures is not None:
            c = np.asarray(self.curvatures, dtype=np.float64).reshape(-1)
            if len(c) != n:
                raise ValueError(f"curvatures has {len(c)} rows, expected {n}")
            self.curvatures = c

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.positions[idx], pick(self.normals), pick(self.colors),
                          pick(self.curvatures))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls(np.zeros((0, 3)))

        def cat(name):
            vals = [getattr(c, name) for c in clouds]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return cls(cat("positions"), cat("normals"), cat("colors"), cat("curvatures"))


@dataclass
class Frame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    pose: Pose
    intrinsics: CameraIntrinsics
    index: int = 0

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w) or self.color.shape[:2] != (h, w):
            raise ValueError("image size does not match intrinsics")


def backproject_depth(frame: Frame, max_depth: float = DEFAULT_MAX_DEPTH_M) -> PointCloud:
    """World-space points for all valid depth pixels of ``frame``."""
    k = frame.intrinsics
    d = np.asarray(frame.depth, dtype=np.float64)
    valid = (d > 0) & (d <= max_depth) & np.isfinite(d)
    v, u = np.nonzero(valid)
    z = d[v, u]
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    cam = np.stack([x, y, z], axis=1)
    colors = np.asarray(frame.color, dtype=np.float64)[v, u, :3]
    return PointCloud(frame.pose.apply(cam), colors=colors)


def project_points(pts: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Pixel coordinates ``(u, v)`` and camera depth of world points."""
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ pose.rotation.T
    return replace(cloud, positions=pose.apply(cloud.positions), normals=normals)


@dataclass
class NormalEstimate:
    cloud: PointCloud
    degenerate: int


def pca_normals(neighborhoods: np.ndarray):
    """Least-eigenvector normals and surface variation of ``(n, k, 3)`` sets."""
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighborhoods.shape[1]
    w, vec = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    total = w.sum(axis=1)
    mean = neighborhoods.mean(axis=1)
    degenerate = total <= 1e-20 * (1.0 + np.einsum("ni,ni->n", mean, mean))
    normals = vec[:, :, 0].copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        curv = np.where(degenerate, 0.0, w[:, 0] / np.where(degenerate, 1.0, total))
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, curv, degenerate


def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 0.0)) -> NormalEstimate:
    """PCA normals over the ``k`` nearest neighbours, oriented to ``viewpoint``.

    ``viewpoint`` is a single point or one point per input row.  The
    curvature field receives the surface variation ``l0 / (l0 + l1 + l2)``.
    """
    n = len(cloud)
    if k < 3 or n < k:
        raise ValueError(f"need at least k >= 3 points, got n={n}, k={k}")
    pts = cloud.positions
    _, idx = cKDTree(pts).query(pts, k=k)
    normals = np.empty((n, 3))
    curv = np.empty(n)
    degenerate = np.zeros(n, dtype=bool)
    chunk = 200_000
    for s in range(0, n, chunk):
        nb, cv, dg = pca_normals(pts[idx[s:s + chunk]])
        normals[s:s + chunk], curv[s:s + chunk], degenerate[s:s + chunk] = nb, cv, dg
    view = np.broadcast_to(np.asarray(viewpoint, dtype=np.float64), pts.shape)
    flip = np.einsum("ij,ij->i", view - pts, normals) < 0
    flip &= ~degenerate
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = replace(cloud, normals=normals, curvatures=curv)
    return NormalEstimate(out, int(degenerate.sum()))
