"""Marching-cubes tables built from per-face crossing rules.

Corner ``c = i + 2j + 4k`` sits at ``(i, j, k)``.  Edge ``e = 4*axis + m``
runs along ``axis`` from its start corner; ``m`` indexes the two remaining
coordinates.  Bit ``c`` of a case index is set when corner ``c`` holds a
negative value.

Instead of a hand-typed 256-row table, the polygons are derived: on each cube
face the sign changes are paired into directed segments, with ambiguous faces
always separating their negative corners.  The rule only depends on the four
corner signs of a face, so two cells sharing a face always agree on it, and
the segments chain into closed loops.  Loops are oriented so triangle normals
point towards the negative corners.
"""
from __future__ import annotations

import numpy as np

CORNERS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)], dtype=np.int64)


def _edges():
    start, end, axis = [], [], []
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        for m in range(4):
            off = [0, 0, 0]
            off[b] = m & 1
            off[c] = (m >> 1) & 1
            s = off[0] + 2 * off[1] + 4 * off[2]
            start.append(s)
            end.append(s + (1 << a))
            axis.append(a)
    return np.array(start), np.array(end), np.array(axis)


EDGE_START, EDGE_END, EDGE_AXIS = _edges()
_EDGE_OF = {}
for _e in range(12):
    _EDGE_OF[(int(EDGE_START[_e]), int(EDGE_END[_e]))] = _e
    _EDGE_OF[(int(EDGE_END[_e]), int(EDGE_START[_e]))] = _e


def _faces():
    """Corners of the six faces, counter-clockwise seen from outside.

    Face ``f = 2*axis + side``.
    """
    faces = []
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for side in (0, 1):
            ring = []
            for ub, uc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                off = [0, 0, 0]
                off[a], off[b], off[c] = side, ub, uc
                ring.append(off[0] + 2 * off[1] + 4 * off[2])
            if side == 0:
                ring = ring[::-1]
            faces.append(ring)
    return faces


FACE_CORNERS = _faces()
FACE_EDGES = [[_EDGE_OF[(r[i], r[(i + 1) % 4])] for i in range(4)] for r in FACE_CORNERS]


def face_segments(neg) -> list[tuple[int, int]]:
    """Directed (in, out) segments on one face.

    ``neg`` holds the negative flags of the face's four corners in ring
    order.  Positions refer to ring edges ``0..3`` (edge ``i`` joins corner
    ``i`` and ``i+1``).  A segment keeps the negative side on its right when
    seen from outside.
    """
    ins = [i for i in range(4) if not neg[i] and neg[(i + 1) % 4]]
    outs = [i for i in range(4) if neg[i] and not neg[(i + 1) % 4]]
    if not ins:
        return []
    if len(ins) == 1:
        return [(ins[0], outs[0])]
    # ambiguous: cut off each negative corner separately
    return [(i, (i + 1) % 4) for i in ins]


def _loops(case: int) -> list[list[int]]:
    neg = [(case >> c) & 1 == 1 for c in range(8)]
    nxt = {}
    for f in range(6):
        ring = FACE_CORNERS[f]
        for a, b in face_segments([neg[c] for c in ring]):
            nxt[FACE_EDGES[f][a]] = FACE_EDGES[f][b]
    loops = []
    seen = set()
    for e0 in sorted(nxt):
        if e0 in seen:
            continue
        loop = [e0]
        seen.add(e0)
        e = nxt[e0]
        while e != e0:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        loops.append(loop)
    return loops


def _edge_mid(e: int) -> np.ndarray:
    return 0.5 * (CORNERS[EDGE_START[e]] + CORNERS[EDGE_END[e]])


def _orientation_sign() -> int:
    # single negative corner at the origin: its loop must face the corner
    loop = _loops(1)[0]
    p = [_edge_mid(e) for e in loop]
    n = np.cross(p[1] - p[0], p[2] - p[0])
    return 1 if np.dot(n, -np.ones(3)) > 0 else -1


_SIGN = _orientation_sign()


def _share_face(e1: int, e2: int) -> bool:
    return any(e1 in fe and e2 in fe for fe in FACE_EDGES)


def _fan_start(loop: list[int]) -> list[int]:
    """Rotate ``loop`` so that no fan diagonal lies inside a cube face.

    Such a diagonal would be emitted by both cells sharing the face and end
    up with four incident triangles.
    """
    n = len(loop)
    for k in range(n):
        if not any(_share_face(loop[k], loop[(k + i) % n]) for i in range(2, n - 1)):
            return loop[k:] + loop[:k]
    raise AssertionError(f"no interior fan for loop {loop}")


LOOPS: list[list[list[int]]] = []
for _case in range(256):
    _ls = _loops(_case)
    LOOPS.append([_fan_start(l if _SIGN > 0 else l[::-1]) for l in _ls])

MAX_TRIS = max(sum(len(l) - 2 for l in ls) for ls in LOOPS)
TRI_TABLE = np.full((256, MAX_TRIS, 3), -1, dtype=np.int64)
TRI_COUNT = np.zeros(256, dtype=np.int64)
for _case, _ls in enumerate(LOOPS):
    _t = 0
    for _l in _ls:
        for _i in range(1, len(_l) - 1):
            TRI_TABLE[_case, _t] = (_l[0], _l[_i], _l[_i + 1])
            _t += 1
    TRI_COUNT[_case] = _t


def edge_face(e1: int, e2: int) -> int:
    """The cube face holding both edges (they must share one)."""
    for f in range(6):
        if e1 in FACE_EDGES[f] and e2 in FACE_EDGES[f]:
            return f
    raise ValueError(f"edges {e1} and {e2} share no face")
