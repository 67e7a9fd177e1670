"""3D Morton (z-order) codes.

Bit ``3i`` of a code is bit ``i`` of x, ``3i+1`` of y and ``3i+2`` of z.
Neighbour lookup is done with masked per-axis increments on the code itself,
so it costs a fixed number of integer operations whatever the depth.
"""
from __future__ import annotations

import numpy as np

MAX_DEPTH = 20

_X_MASK = int("001" * 21, 2)
_Y_MASK = _X_MASK << 1
_Z_MASK = _X_MASK << 2
_AXIS_MASKS = (_X_MASK, _Y_MASK, _Z_MASK)

# 26 neighbour offsets, in lexicographic (dz, dy, dx) order
NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


def _spread(v: int) -> int:
    v &= 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def _compact(v: int) -> int:
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


def _check_depth(depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")


def morton_encode(ix: int, iy: int, iz: int, depth: int = MAX_DEPTH) -> int:
    """Interleave three grid indices into one code."""
    _check_depth(depth)
    n = 1 << depth
    for name, v in (("ix", ix), ("iy", iy), ("iz", iz)):
        if not 0 <= v < n:
            raise ValueError(f"{name}={v} outside [0, {n}) for depth {depth}")
    return _spread(ix) | (_spread(iy) << 1) | (_spread(iz) << 2)


def morton_decode(code: int, depth: int = MAX_DEPTH) -> tuple[int, int, int]:
    _check_depth(depth)
    if not 0 <= code < (1 << (3 * depth)):
        raise ValueError(f"code {code} out of range for depth {depth}")
    return _compact(code), _compact(code >> 1), _compact(code >> 2)


# numpy versions operate on uint64 arrays, no range checks
def _spread_np(v):
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_np(v):
    v = v & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def encode_array(ijk: np.ndarray) -> np.ndarray:
    """Encode an ``(n, 3)`` array of non-negative indices to uint64 codes."""
    ijk = np.asarray(ijk)
    return _spread_np(ijk[:, 0]) | (_spread_np(ijk[:, 1]) << np.uint64(1)) | (
        _spread_np(ijk[:, 2]) << np.uint64(2))


def decode_array(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.empty((codes.shape[0], 3), dtype=np.int64)
    out[:, 0] = _compact_np(codes)
    out[:, 1] = _compact_np(codes >> np.uint64(1))
    out[:, 2] = _compact_np(codes >> np.uint64(2))
    return out


# per depth: (mask, complement within the used bits) for each axis
_STEP_MASKS = [None] + [
    tuple((m & ((1 << (3 * d)) - 1), ((1 << (3 * d)) - 1) ^ (m & ((1 << (3 * d)) - 1)))
          for m in _AXIS_MASKS)
    for d in range(1, MAX_DEPTH + 1)
]


def _step(code: int, axis: int, delta: int, depth: int) -> int | None:
    """Move one cell along ``axis``; ``None`` when leaving the grid."""
    m, inv = _STEP_MASKS[depth][axis]
    part = code & m
    if delta > 0:
        if part == m:
            return None
        # filling the other axes' bits makes the carry skip over them
        part = ((part | inv) + 1) & m
    else:
        if part == 0:
            return None
        part = (part - 1) & m
    return (code & inv) | part


def neighbor_code(code: int, offset, depth: int = MAX_DEPTH) -> int | None:
    """Code of the cell at integer ``offset`` (each component in -1..1)."""
    for axis in range(3):
        d = offset[axis]
        if d:
            code = _step(code, axis, d, depth)
            if code is None:
                return None
    return code


def neighbor_codes(code: int, depth: int = MAX_DEPTH) -> list[int]:
    """Face, edge and corner neighbours of ``code`` that lie inside the grid.

    Each axis is stepped once in each direction, then the 26 combinations are
    assembled from those partial codes.  Cells on the grid boundary get fewer
    than 26 results.
    """
    _check_depth(depth)
    full = (1 << (3 * depth)) - 1
    if not 0 <= code <= full:
        raise ValueError(f"code {code} out of range for depth {depth}")
    parts = []
    for axis in range(3):
        m = _AXIS_MASKS[axis] & full
        p = code & m
        lo = None if p == 0 else (p - 1) & m
        hi = None if p == m else ((p | ~m) + 1) & m
        parts.append((lo, p, hi))
    out = []
    for dz in range(3):
        pz = parts[2][dz]
        if pz is None:
            continue
        for dy in range(3):
            py = parts[1][dy]
            if py is None:
                continue
            for dx in range(3):
                px = parts[0][dx]
                if px is None or (dx == 1 and dy == 1 and dz == 1):
                    continue
                out.append(px | py | pz)
    return out
