from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octomesh.evaluation import grid_mesh, psnr
from octomesh.geometry import CameraIntrinsics, Frame, Pose
from octomesh.mesh import TriangleMesh
from octomesh.refine_point import OptState
from octomesh.shading import (ShadingModel, ShadingOptimizers, irradiance, rasterize, refine_shading,
                              shade, shading_loss_grad)

from helpers import central_diff, rel_err

INTR = CameraIntrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)
EYE = Pose()


def facing_plane(z=1.0, half=0.5, n=6):
    """Grid at depth ``z`` whose normal (0, 0, -1) faces a camera at the origin."""
    m = grid_mesh((-half, -half, z), (0, 2 * half, 0), (2 * half, 0, 0), n, n)
    m.compute_vertex_normals()
    return m


def bumpy_mesh(rng, n=3):
    """Small grid in front of the camera with random relief."""
    m = grid_mesh((-0.4, -0.4, 1.0), (0, 0.8, 0), (0.8, 0, 0), n, n)
    m.vertices[:, 2] += 0.08 * rng.normal(size=m.n_vertices)
    m.compute_vertex_normals()
    return m


def frame_of(color):
    return Frame(np.asarray(color, float), np.zeros((INTR.height, INTR.width)), EYE, INTR)


def render(mesh, model):
    return shade(rasterize(mesh, EYE, INTR), mesh, model)


# -- rasterizer -----------------------------------------------------------------

def ray_hits(mesh, u, v):
    """Nearest front-facing hit along the pixel ray (Moller-Trumbore)."""
    d = np.array([(u - INTR.cx) / INTR.fx, (v - INTR.cy) / INTR.fy, 1.0])
    best, bf = np.inf, -1
    for fi, f in enumerate(mesh.faces):
        a, b, c = mesh.vertices[f]
        e1, e2 = b - a, c - a
        if np.cross(e1, e2) @ d >= 0:  # back-facing
            continue
        p = np.cross(d, e2)
        det = e1 @ p
        s = -a
        w1 = (s @ p) / det
        q = np.cross(s, e1)
        w2 = (d @ q) / det
        t = (e2 @ q) / det
        if w1 >= 0 and w2 >= 0 and w1 + w2 <= 1 and 0 < t < best:
            best, bf = t, fi
    return bf, best


def test_single_face_covers_principal_point(kernel_path):
    m = TriangleMesh([[-1, -1, 2], [-1, 1, 2], [1, 0, 2]], [[0, 1, 2]])
    buf = rasterize(m, EYE, INTR)
    y, x = int(round(INTR.cy)), int(round(INTR.cx))
    assert buf.face_id[y, x] == 0
    assert buf.depth[y, x] == pytest.approx(2.0)


def test_empty_mesh_is_background(kernel_path):
    buf = rasterize(TriangleMesh.empty(), EYE, INTR)
    assert not buf.covered.any()


def test_z_buffer_keeps_nearest(kernel_path):
    tri = np.array([[-1, -1, 0], [-1, 1, 0], [1, 0, 0]], float)
    m = TriangleMesh(np.concatenate([tri + [0, 0, 2], tri + [0, 0, 1]]), [[0, 1, 2], [3, 4, 5]])
    buf = rasterize(m, EYE, INTR)
    y, x = int(round(INTR.cy)), int(round(INTR.cx))
    assert buf.face_id[y, x] == 1 and buf.depth[y, x] == pytest.approx(1.0)


def test_back_faces_are_culled(kernel_path):
    m = TriangleMesh([[-1, -1, 2], [1, 0, 2], [-1, 1, 2]], [[0, 1, 2]])
    assert not rasterize(m, EYE, INTR).covered.any()


def test_behind_camera_is_culled(kernel_path):
    m = TriangleMesh([[-1, -1, -2], [-1, 1, -2], [1, 0, -2]], [[0, 1, 2]])
    assert not rasterize(m, EYE, INTR).covered.any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_raster_matches_ray_casting(seed):
    rng = np.random.default_rng(seed)
    m = bumpy_mesh(rng, 3)
    m.vertices[:, 2] += rng.uniform(0, 1)
    buf = rasterize(m, EYE, INTR)
    cov = buf.covered
    assert np.all(buf.bary[cov] >= -1e-6)
    np.testing.assert_allclose(buf.bary[cov].sum(-1), 1.0, atol=1e-6)
    for _ in range(40):
        v, u = rng.integers(0, INTR.height), rng.integers(0, INTR.width)
        fid, t = ray_hits(m, u, v)
        if fid < 0:
            continue
        if buf.face_id[v, u] != fid:  # pixel centre on a shared edge
            assert abs(buf.depth[v, u] - t) < 1e-9
            continue
        assert buf.depth[v, u] == pytest.approx(t, abs=1e-9)
        # perspective-correct weights reproduce the hit point
        p = buf.bary[v, u] @ m.vertices[m.faces[fid]]
        np.testing.assert_allclose(p[:2] / p[2], [(u - INTR.cx) / INTR.fx, (v - INTR.cy) / INTR.fy],
                                   atol=1e-9)


# -- shading ------------------------------------------------------------------------

def test_irradiance_substitution():
    assert irradiance(np.array([0.0, 0.0, 1.0]), [0.8, 0, 0, 0.2]) == pytest.approx(1.0)


def test_shade_substitution():
    m = grid_mesh((-0.5, -0.5, 1), (1, 0, 0), (0, 1, 0), 2, 2)  # faces away: flip to face camera
    m.faces = m.faces[:, [0, 2, 1]]
    m.vertex_normals = np.tile([0.0, 0.0, 1.0], (m.n_vertices, 1))
    img = render(m, ShadingModel([0.8, 0, 0, 0.2], np.full((m.n_vertices, 3), 0.5)))
    y, x = int(round(INTR.cy)), int(round(INTR.cx))
    np.testing.assert_allclose(img[y, x], 0.5)


def test_ambient_light_shows_albedo():
    rng = np.random.default_rng(1)
    m = facing_plane()
    alb = rng.uniform(0.1, 0.9, (m.n_vertices, 3))
    buf = rasterize(m, EYE, INTR)
    img = shade(buf, m, ShadingModel([1, 0, 0, 0], alb))
    cov = buf.covered
    expect = np.einsum("pk,pkj->pj", buf.bary[cov], alb[m.faces[buf.face_id[cov]]])
    np.testing.assert_allclose(img[cov], expect, atol=1e-12)
    assert not img[~cov].any()


def test_negative_irradiance_clamps_to_black():
    m = facing_plane()
    img = render(m, ShadingModel([0, 0, 0, 1], np.full((m.n_vertices, 3), 0.7)))
    assert rasterize(m, EYE, INTR).covered.any() and not img.any()


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_scale_ambiguity(c):
    rng = np.random.default_rng(2)
    m = bumpy_mesh(rng)
    alb = rng.uniform(0.2, 0.6, (m.n_vertices, 3))
    sh = np.array([0.7, 0.1, -0.1, -0.2])
    a = render(m, ShadingModel(sh, alb))
    b = render(m, ShadingModel(sh / c, alb * c))
    assert np.max(np.abs(a - b)) <= 1e-6


def test_shade_is_deterministic():
    m = bumpy_mesh(np.random.default_rng(3))
    model = ShadingModel([0.7, 0.1, -0.1, -0.2], np.full((m.n_vertices, 3), 0.4))
    assert render(m, model).tobytes() == render(m, model).tobytes()


def test_beta_is_fixed():
    with pytest.raises(ValueError):
        ShadingModel([1, 0, 0, 0], np.zeros((1, 3)), beta=0.1)


# -- loss and gradients -----------------------------------------------------------------

def test_loss_zero_at_target():
    m = bumpy_mesh(np.random.default_rng(4))
    model = ShadingModel([0.7, 0.1, -0.1, -0.2], np.full((m.n_vertices, 3), 0.4))
    g = shading_loss_grad(m, model, [frame_of(render(m, model))])
    assert g.loss == 0.0
    assert not g.albedo.any() and not g.sh.any() and not g.vertices.any()


def test_dimmer_albedo_wants_more_light():
    m = facing_plane()
    model = ShadingModel([0.6, 0, 0, -0.2], np.full((m.n_vertices, 3), 0.5))
    target = render(m, model)
    model.albedo *= 0.5
    assert shading_loss_grad(m, model, [frame_of(target)]).sh[0] < 0


def test_invisible_mesh_rejected():
    m = facing_plane(z=-1.0)
    with pytest.raises(ValueError, match="mesh not visible"):
        shading_loss_grad(m, ShadingModel.neutral(m.n_vertices), [frame_of(np.zeros((48, 64, 3)))])


def _fd_setup(trial):
    rng = np.random.default_rng(500 + trial)
    m = bumpy_mesh(rng, 3)  # 16 vertices, 18 faces
    target = rng.uniform(0.0, 0.8, (INTR.height, INTR.width, 3))
    model = ShadingModel([0.6, 0.1, -0.15, -0.3], rng.uniform(0.2, 0.7, (m.n_vertices, 3)))
    return m, [frame_of(target)], model


@pytest.mark.parametrize("trial", range(10))
def test_albedo_and_sh_gradients(trial):
    m, frames, model = _fd_setup(trial)
    bufs = [rasterize(m, EYE, INTR)]
    g = shading_loss_grad(m, model, frames, bufs)

    def f_rho(a):
        return shading_loss_grad(m, ShadingModel(model.sh, a), frames, bufs).loss

    def f_l(s):
        return shading_loss_grad(m, ShadingModel(s, model.albedo), frames, bufs).loss

    assert rel_err(g.albedo, central_diff(f_rho, model.albedo)) <= 1e-4
    assert rel_err(g.sh, central_diff(f_l, model.sh)) <= 1e-4


@pytest.mark.parametrize("trial", range(10))
def test_vertex_gradient_through_normals(trial):
    m, frames, model = _fd_setup(trial)
    bufs = [rasterize(m, EYE, INTR)]
    g = shading_loss_grad(m, model, frames, bufs)

    def f_v(v):
        return shading_loss_grad(TriangleMesh(v, m.faces), model, frames, bufs).loss

    assert rel_err(g.vertices, central_diff(f_v, m.vertices)) <= 1e-4


# -- optimisation ------------------------------------------------------------------------

def test_zero_iterations_leave_inputs():
    m = bumpy_mesh(np.random.default_rng(5))
    model = ShadingModel.neutral(m.n_vertices)
    r = refine_shading(m, [frame_of(np.zeros((48, 64, 3)))], model, iters=0)
    np.testing.assert_array_equal(r.mesh.vertices, m.vertices)
    np.testing.assert_array_equal(r.model.albedo, model.albedo)
    np.testing.assert_array_equal(r.model.sh, model.sh)


def test_black_target_with_black_albedo_is_optimal():
    m = bumpy_mesh(np.random.default_rng(6))
    model = ShadingModel([0.5, 0, 0, 0], np.zeros((m.n_vertices, 3)))
    r = refine_shading(m, [frame_of(np.zeros((48, 64, 3)))], model, iters=5)
    assert r.trace[0].shading == 0.0
    np.testing.assert_array_equal(r.model.albedo, 0.0)
    np.testing.assert_array_equal(r.model.sh, model.sh)
    np.testing.assert_array_equal(r.mesh.vertices, m.vertices)


def test_plane_recovers_rendering():
    m = facing_plane()
    truth = ShadingModel([0.7, 0.1, 0.1, -0.3], np.full((m.n_vertices, 3), 0.6))
    frames = [frame_of(render(m, truth))]
    start = ShadingModel([0.5, 0, 0, 0], np.full((m.n_vertices, 3), 0.5))
    r = refine_shading(m, frames, start, iters=300)
    buf = rasterize(r.mesh, EYE, INTR)
    out = shade(buf, r.mesh, r.model)
    assert psnr(out, frames[0].color, mask=buf.covered) >= 35.0


def test_albedo_only_matches_least_squares():
    """With fixed ambient light the albedo optimum is a linear least-squares
    problem over the barycentric design matrix."""
    rng = np.random.default_rng(7)
    m = facing_plane(n=4)
    target = np.clip(0.5 + 0.15 * rng.normal(size=(INTR.height, INTR.width, 3)), 0, 1)
    buf = rasterize(m, EYE, INTR)
    yy, xx = np.nonzero(buf.covered)
    A = np.zeros((len(yy), m.n_vertices))
    np.add.at(A, (np.repeat(np.arange(len(yy)), 3), m.faces[buf.face_id[yy, xx]].ravel()),
              buf.bary[yy, xx].ravel())
    closed = np.linalg.lstsq(A, target[yy, xx], rcond=None)[0]

    opt = ShadingOptimizers(albedo=OptState(lr=2e-3), sh=OptState(lr=0.0))
    model = ShadingModel([1, 0, 0, 0], np.full((m.n_vertices, 3), 0.5))
    r = refine_shading(m, [frame_of(target)], model, opt, iters=3000, move_vertices=False)
    np.testing.assert_array_equal(r.model.sh, [1, 0, 0, 0])
    assert np.max(np.abs(r.model.albedo - closed)) <= 1e-3


def test_albedo_stays_nonnegative():
    m = facing_plane()
    model = ShadingModel([0.5, 0, 0, 0], np.full((m.n_vertices, 3), 0.01))
    r = refine_shading(m, [frame_of(np.zeros((48, 64, 3)))], model, iters=20, move_vertices=False)
    assert r.model.albedo.min() >= 0.0


def test_warmup_updates_lighting_only():
    m = facing_plane()
    model = ShadingModel([0.5, 0, 0, 0], np.full((m.n_vertices, 3), 0.5))
    r = refine_shading(m, [frame_of(np.full((48, 64, 3), 0.4))], model, iters=0, warmup=10)
    np.testing.assert_array_equal(r.model.albedo, model.albedo)
    np.testing.assert_array_equal(r.mesh.vertices, m.vertices)
    assert r.model.sh[0] != 0.5 and len(r.trace) == 10
