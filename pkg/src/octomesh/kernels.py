"""Hot inner loops, each with a numba kernel and a numpy fallback.

The public functions dispatch on :data:`octomesh._accel.USE_NUMBA`.  Both
paths return identical results up to floating-point contraction; the test
suite runs them side by side.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# greedy L1 deduplication


@njit
def _dedup_l1_nb(new_pos, new_starts, old_pos, old_starts, tmin):
    n = new_pos.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    buf = np.empty(n, dtype=np.int64)
    for g in range(new_starts.shape[0] - 1):
        nk = 0
        o0 = old_starts[g]
        o1 = old_starts[g + 1]
        for i in range(new_starts[g], new_starts[g + 1]):
            px = new_pos[i, 0]
            py = new_pos[i, 1]
            pz = new_pos[i, 2]
            ok = True
            for j in range(o0, o1):
                d = abs(old_pos[j, 0] - px) + abs(old_pos[j, 1] - py) + abs(old_pos[j, 2] - pz)
                if d < tmin:
                    ok = False
                    break
            if ok:
                for t in range(nk):
                    j = buf[t]
                    d = abs(new_pos[j, 0] - px) + abs(new_pos[j, 1] - py) + abs(new_pos[j, 2] - pz)
                    if d < tmin:
                        ok = False
                        break
            if ok:
                keep[i] = True
                buf[nk] = i
                nk += 1
    return keep


def _dedup_l1_np(new_pos, new_starts, old_pos, old_starts, tmin):
    keep = np.zeros(len(new_pos), dtype=bool)
    for g in range(len(new_starts) - 1):
        s, e = new_starts[g], new_starts[g + 1]
        if s == e:
            continue
        cand = new_pos[s:e]
        old = old_pos[old_starts[g]:old_starts[g + 1]]
        ok = np.ones(e - s, dtype=bool)
        if len(old):
            ok = np.abs(cand[:, None, :] - old[None, :, :]).sum(-1).min(axis=1) >= tmin
        close = np.abs(cand[:, None, :] - cand[None, :, :]).sum(-1) < tmin
        for i in range(e - s):
            if ok[i]:
                keep[s + i] = True
                # later candidates too close to this one are rejected
                ok[i + 1:] &= ~close[i, i + 1:]
    return keep


def dedup_l1(new_pos, new_starts, old_pos, old_starts, tmin: float) -> np.ndarray:
    """Greedy per-group deduplication under an L1 distance threshold.

    Group ``g`` covers ``new_pos[new_starts[g]:new_starts[g+1]]`` and the
    already stored ``old_pos[old_starts[g]:old_starts[g+1]]``.  A new point is
    kept iff its L1 distance to every stored point and every earlier kept
    point of its group is at least ``tmin``.
    """
    args = (np.ascontiguousarray(new_pos, dtype=np.float64), np.asarray(new_starts, dtype=np.int64),
            np.ascontiguousarray(old_pos, dtype=np.float64).reshape(-1, 3),
            np.asarray(old_starts, dtype=np.int64), float(tmin))
    if _accel.USE_NUMBA:
        return _dedup_l1_nb(*args)
    return _dedup_l1_np(*args)


# ---------------------------------------------------------------------------
# nearest neighbour over points bucketed by Morton-coded cells


@njit
def _spread_nb(v):
    v = np.uint64(v) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


@njit
def _scan_cell_nb(q, x, y, z, codes, starts, pts, best, bi):
    c = _spread_nb(x) | (_spread_nb(y) << np.uint64(1)) | (_spread_nb(z) << np.uint64(2))
    k = np.searchsorted(codes, c)
    if k >= codes.shape[0] or codes[k] != c:
        return best, bi
    for i in range(starts[k], starts[k + 1]):
        dx = pts[i, 0] - q[0]
        dy = pts[i, 1] - q[1]
        dz = pts[i, 2] - q[2]
        d = dx * dx + dy * dy + dz * dz
        if d < best or (d == best and (bi < 0 or i < bi)):
            best = d
            bi = i
    return best, bi


@njit
def _nearest_cells_nb(queries, origin, edge, ncell, codes, starts, pts, radius):
    nq = queries.shape[0]
    out_idx = np.full(nq, -1, dtype=np.int64)
    out_d = np.full(nq, np.inf)
    r2 = radius * radius
    lo = np.empty(3, dtype=np.int64)
    hi = np.empty(3, dtype=np.int64)
    own = np.empty(3, dtype=np.int64)
    for q in range(nq):
        qp = queries[q]
        for a in range(3):
            rel = (qp[a] - origin[a]) / edge
            lo[a] = max(int(np.floor(rel - radius / edge)), 0)
            hi[a] = min(int(np.floor(rel + radius / edge)), ncell - 1)
            own[a] = int(np.floor(rel))
        best = r2
        bi = -1
        # the query's own cell first, so the box test below prunes early
        own_in = True
        for a in range(3):
            if own[a] < lo[a] or own[a] > hi[a]:
                own_in = False
        if own_in:
            best, bi = _scan_cell_nb(qp, own[0], own[1], own[2], codes, starts, pts, best, bi)
        for z in range(lo[2], hi[2] + 1):
            gz = max(origin[2] + z * edge - qp[2], qp[2] - origin[2] - (z + 1) * edge, 0.0)
            for y in range(lo[1], hi[1] + 1):
                gy = max(origin[1] + y * edge - qp[1], qp[1] - origin[1] - (y + 1) * edge, 0.0)
                for x in range(lo[0], hi[0] + 1):
                    if own_in and x == own[0] and y == own[1] and z == own[2]:
                        continue
                    gx = max(origin[0] + x * edge - qp[0], qp[0] - origin[0] - (x + 1) * edge, 0.0)
                    # strict test keeps equal-distance points for the index tie-break
                    if gx * gx + gy * gy + gz * gz > best:
                        continue
                    best, bi = _scan_cell_nb(qp, x, y, z, codes, starts, pts, best, bi)
        if bi >= 0:
            out_idx[q] = bi
            out_d[q] = np.sqrt(best)
    return out_idx, out_d


def _nearest_cells_np(queries, pts, radius):
    if len(pts) == 0:
        return np.full(len(queries), -1, dtype=np.int64), np.full(len(queries), np.inf)
    d, idx = cKDTree(pts).query(queries, k=1, distance_upper_bound=radius * (1 + 1e-12))
    miss = ~np.isfinite(d) | (d > radius)
    idx = np.where(miss, -1, idx).astype(np.int64)
    d = np.where(miss, np.inf, d)
    return idx, d


def nearest_in_cells(queries, origin, edge, ncell, codes, starts, pts, radius: float):
    """Nearest point within ``radius`` of each query.

    ``pts`` are grouped by cell; ``codes`` (sorted, uint64) and ``starts``
    describe the groups.  Returns ``(index, distance)`` with ``-1`` / ``inf``
    for queries that have no point in range.  Ties go to the lowest index.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    if _accel.USE_NUMBA:
        return _nearest_cells_nb(queries, np.asarray(origin, dtype=np.float64), float(edge),
                                 int(ncell), np.asarray(codes, dtype=np.uint64),
                                 np.asarray(starts, dtype=np.int64),
                                 np.ascontiguousarray(pts, dtype=np.float64), float(radius))
    return _nearest_cells_np(queries, np.asarray(pts, dtype=np.float64), float(radius))


# ---------------------------------------------------------------------------
# z-buffered triangle rasterisation at pixel centres


@njit
def _raster_nb(cam, faces, fx, fy, cx, cy, h, w, near):
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        z0 = cam[i0, 2]
        z1 = cam[i1, 2]
        z2 = cam[i2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        # back-face test in camera space
        ax = cam[i1, 0] - cam[i0, 0]
        ay = cam[i1, 1] - cam[i0, 1]
        az = cam[i1, 2] - cam[i0, 2]
        bx = cam[i2, 0] - cam[i0, 0]
        by = cam[i2, 1] - cam[i0, 1]
        bz = cam[i2, 2] - cam[i0, 2]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
        if nx * cam[i0, 0] + ny * cam[i0, 1] + nz * cam[i0, 2] >= 0:
            continue
        u0 = fx * cam[i0, 0] / z0 + cx
        v0 = fy * cam[i0, 1] / z0 + cy
        u1 = fx * cam[i1, 0] / z1 + cx
        v1 = fy * cam[i1, 1] / z1 + cy
        u2 = fx * cam[i2, 0] / z2 + cx
        v2 = fy * cam[i2, 1] / z2 + cy
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(u0, min(u1, u2)))), 0)
        xmax = min(int(np.floor(max(u0, max(u1, u2)))), w - 1)
        ymin = max(int(np.ceil(min(v0, min(v1, v2)))), 0)
        ymax = min(int(np.floor(max(v0, max(v1, v2)))), h - 1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) / area
                w1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                b0 = w0 / z0
                b1 = w1 / z1
                b2 = w2 / z2
                s = b0 + b1 + b2
                z = 1.0 / s
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = f
                    bary[py, px, 0] = b0 / s
                    bary[py, px, 1] = b1 / s
                    bary[py, px, 2] = b2 / s
    return face_id, bary, depth


def _raster_np(cam, faces, fx, fy, cx, cy, h, w, near):
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    if len(faces) == 0:
        return face_id, bary, depth
    tri = cam[faces]
    z = tri[:, :, 2]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ij,ij->i", n, tri[:, 0]) < 0
    ok = np.all(z > near, axis=1) & front
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * tri[:, :, 0] / z + cx
        v = fy * tri[:, :, 1] / z + cy
    for f in np.nonzero(ok)[0]:
        (u0, u1, u2), (v0, v1, v2) = u[f], v[f]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(u0, u1, u2))), 0)
        xmax = min(int(np.floor(max(u0, u1, u2))), w - 1)
        ymin = max(int(np.ceil(min(v0, v1, v2))), 0)
        ymax = min(int(np.floor(max(v0, v1, v2))), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1]
        w0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) / area
        w1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        b = np.stack([w0 / z[f, 0], w1 / z[f, 1], w2 / z[f, 2]], axis=-1)[inside]
        s = b.sum(axis=1)
        zz = 1.0 / s
        yy, xx = py[inside], px[inside]
        closer = zz < depth[yy, xx]
        yy, xx = yy[closer], xx[closer]
        depth[yy, xx] = zz[closer]
        face_id[yy, xx] = f
        bary[yy, xx] = b[closer] / s[closer, None]
    return face_id, bary, depth


def rasterize_faces(cam_vertices, faces, fx, fy, cx, cy, height, width, near=1e-4):
    """Per-pixel face index, perspective-correct barycentrics and depth.

    Vertices are in camera coordinates (x right, y down, z forward).  Faces
    seen from behind or crossing the near plane are skipped.
    """
    args = (np.ascontiguousarray(cam_vertices, dtype=np.float64),
            np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3),
            float(fx), float(fy), float(cx), float(cy), int(height), int(width), float(near))
    if _accel.USE_NUMBA:
        return _raster_nb(*args)
    return _raster_np(*args)
