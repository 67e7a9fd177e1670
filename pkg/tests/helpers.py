"""Shared fixtures-as-functions for the test modules."""
from __future__ import annotations

import numpy as np

from octomesh.geometry import PointCloud
from octomesh.mesh import TriangleMesh


def plane_cloud(z=0.0, extent=(0.0, 0.1), spacing=0.01, curvature=0.0):
    """Grid of points on the plane ``z`` with +z normals."""
    g = np.arange(extent[0], extent[1] + 1e-12, spacing)
    x, y = np.meshgrid(g, g)
    pts = np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)
    n = len(pts)
    return PointCloud(pts, np.tile([0.0, 0.0, 1.0], (n, 1)), np.full((n, 3), 0.5), np.full(n, curvature))


def sphere_cloud(n, rng, radius=1.0, center=(0.0, 0.0, 0.0)):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return PointCloud(np.asarray(center) + radius * d, d, np.full((n, 3), 0.5), np.zeros(n))


def random_mesh(rng, n=20):
    """Closed convex-hull mesh over ``n`` random points, outward winding."""
    from scipy.spatial import ConvexHull

    p = rng.normal(size=(n, 3))
    hull = ConvexHull(p)
    f = hull.simplices.copy()
    c = p.mean(axis=0)
    for i, tri in enumerate(f):
        nrm = np.cross(p[tri[1]] - p[tri[0]], p[tri[2]] - p[tri[0]])
        if nrm @ (p[tri[0]] - c) < 0:
            f[i] = tri[[0, 2, 1]]
    return TriangleMesh(p, f)


def central_diff(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fun(xp) - fun(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
