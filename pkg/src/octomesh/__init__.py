"""Incremental surface reconstruction on a hybrid voxel-octree."""
from __future__ import annotations

from .geometry import CameraIntrinsics, Frame, PointCloud, Pose
from .mesh import TriangleMesh
from .octree import HybridVoxelOctree

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "Frame", "HybridVoxelOctree", "PointCloud", "Pose", "TriangleMesh"]
