"""File formats: PLY meshes and clouds, OBJ, depth/colour PNGs, poses."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .geometry import CameraIntrinsics, PointCloud, Pose
from .mesh import TriangleMesh


def _to_u8(c: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(c, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with float32 positions/normals, uint8 colours."""
    n = mesh.n_vertices
    normals = mesh.vertex_normals if mesh.vertex_normals is not None else np.zeros((n, 3))
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.full((n, 3), 0.5)
    v = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                           ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
                           ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    for k, name in enumerate("xyz"):
        v[name] = mesh.vertices[:, k]
        v["n" + name] = normals[:, k]
    rgb = _to_u8(colors)
    for k, name in enumerate(("red", "green", "blue")):
        v[name] = rgb[:, k]
    f = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    f["vertex_indices"] = mesh.faces
    els = [PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")]
    PlyData(els, text=False, byte_order="<").write(str(path))


def read_ply(path) -> TriangleMesh:
    """Mesh (or face-less point set) from a PLY file, ascii or binary."""
    data = PlyData.read(str(path))
    v = data["vertex"].data
    names = v.dtype.names
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = (np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
               if {"nx", "ny", "nz"} <= set(names) else None)
    colors = (np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
              if {"red", "green", "blue"} <= set(names) else None)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in data and data["face"].count:
        fd = data["face"].data
        key = "vertex_indices" if "vertex_indices" in fd.dtype.names else fd.dtype.names[0]
        rows = [np.asarray(r, dtype=np.int64) for r in fd[key]]
        if any(len(r) != 3 for r in rows):
            raise ValueError("only triangle faces are supported")
        faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(pos, faces, vertex_normals=normals, vertex_colors=colors)


def read_ply_cloud(path) -> PointCloud:
    m = read_ply(path)
    return PointCloud(m.vertices, m.vertex_normals, m.vertex_colors)


def write_obj(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ; vertex colours follow the position as ``v x y z r g b``."""
    colors = mesh.vertex_colors
    with open(path, "w") as fh:
        for i, p in enumerate(mesh.vertices):
            if colors is not None:
                c = colors[i]
                fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            else:
                fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        if mesh.vertex_normals is not None:
            for n in mesh.vertex_normals:
                fh.write(f"vn {n[0]:.6g} {n[1]:.6g} {n[2]:.6g}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]}//{f[0]} {f[1]}//{f[1]} {f[2]}//{f[2]}\n")
        else:
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def export_mesh(mesh: TriangleMesh, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "ply":
        write_ply(mesh, path)
    elif fmt == "obj":
        write_obj(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")
    return path


# -- images and camera files -------------------------------------------------

def read_depth_png(path, depth_scale: float) -> np.ndarray:
    """16-bit depth PNG to metres; 0 marks missing depth."""
    raw = np.asarray(Image.open(path))
    if raw.ndim != 2:
        raise ValueError(f"{path}: depth image must be single channel")
    return raw.astype(np.float64) / depth_scale


def write_depth_png(path, depth: np.ndarray, depth_scale: float) -> None:
    raw = np.clip(np.round(np.asarray(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_color_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"))
    return img.astype(np.float64) / 255.0


def write_color_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(_to_u8(rgb)).save(path)


def read_pose(path) -> Pose:
    m = np.loadtxt(path, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{path}: pose must be a 4x4 matrix")
    return Pose.from_matrix(m)


def write_pose(path, pose: Pose) -> None:
    np.savetxt(path, pose.matrix, fmt="%.17g")


def read_intrinsics(path) -> CameraIntrinsics:
    """``key = value`` lines with width, height, fx, fy, cx, cy, depth_scale."""
    vals = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, _, v = line.partition("=")
        vals[k.strip()] = float(v)
    need = ("width", "height", "fx", "fy", "cx", "cy")
    missing = [k for k in need if k not in vals]
    if missing:
        raise ValueError(f"{path}: missing intrinsics {missing}")
    return CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]),
                            int(vals["height"]), vals.get("depth_scale", 1000.0))


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    lines = [f"width = {intr.width}", f"height = {intr.height}", f"fx = {intr.fx!r}",
             f"fy = {intr.fy!r}", f"cx = {intr.cx!r}", f"cy = {intr.cy!r}",
             f"depth_scale = {intr.depth_scale!r}"]
    Path(path).write_text("\n".join(lines) + "\n")
