import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npg import autodiff as ad
from npg.autodiff import Tensor, finite_diff_check
from npg.geometry import (Camera, bilinear_sample, matrix_to_quat, project, quat_to_matrix,
                          random_rotation)


def identity_camera(**kw):
    base = dict(R=np.eye(3), t=np.zeros(3), fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    base.update(kw)
    return Camera(**base)


def test_project_principal_axis():
    uv, depth, vis = project(identity_camera(), np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]]))
    np.testing.assert_allclose(uv, [[50.0, 50.0], [60.0, 50.0]])
    np.testing.assert_allclose(depth, [1.0, 1.0])
    assert vis.all()


def test_project_matches_homogeneous_pipeline():
    rng = np.random.default_rng(0)
    for _ in range(50):
        R = random_rotation(rng)
        cam = Camera(R, rng.normal(size=3), 80.0, 90.0, 31.5, 30.0, 64, 64)
        p = rng.normal(size=(20, 3)) + cam.center + 3.0 * cam.R[2]
        E = np.eye(4)
        E[:3, :3], E[:3, 3] = cam.R, cam.t
        K = np.hstack([cam.K, np.zeros((3, 1))])
        h = (K @ E @ np.hstack([p, np.ones((20, 1))]).T).T
        ref = h[:, :2] / h[:, 2:]
        uv, depth, vis = project(cam, p)
        np.testing.assert_allclose(uv[vis], ref[vis], atol=1e-10)
        np.testing.assert_allclose(depth, h[:, 2], atol=1e-10)


def test_points_behind_camera_flagged():
    _, _, vis = project(identity_camera(), np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1e-9], [0, 0, 1.0]]))
    assert vis.tolist() == [False, False, True]


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 5))
def test_projection_scale_invariant_along_rays(lam, x, y, z):
    cam = identity_camera()
    a, _, _ = project(cam, np.array([[x, y, z]]))
    b, _, _ = project(cam, np.array([[lam * x, lam * y, lam * z]]))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_camera_validation():
    with pytest.raises(ValueError):
        identity_camera(R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        identity_camera(fx=0.0)
    with pytest.raises(ValueError):
        identity_camera(R=np.eye(3) * 1.01)


def test_opengl_round_trip():
    rng = np.random.default_rng(1)
    cam = Camera(random_rotation(rng), rng.normal(size=3), 70.0, 70.0, 31.5, 31.5, 64, 64)
    back = Camera.from_c2w_opengl(cam.c2w_opengl(), 70.0, 70.0, 31.5, 31.5, 64, 64)
    np.testing.assert_allclose(back.R, cam.R, atol=1e-12)
    np.testing.assert_allclose(back.t, cam.t, atol=1e-12)


def test_quat_known_rotations():
    np.testing.assert_allclose(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))
    c = np.cos(np.pi / 4)
    Rx = quat_to_matrix(np.array([c, c, 0, 0]))
    np.testing.assert_allclose(Rx, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)


def test_quat_zero_rejected():
    with pytest.raises(ValueError):
        quat_to_matrix(np.zeros(4))


def test_quat_random_orthonormal_and_sign_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(200):
        q = rng.normal(size=4)
        R = quat_to_matrix(q)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(R, quat_to_matrix(-q))
        np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_quat_batched_tensor_gradient():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 3, 3))
    rep = finite_diff_check(lambda q: (quat_to_matrix(q) * w).sum(), rng.normal(size=(3, 4)))
    assert rep.passed, rep.message


def test_bilinear_center_and_midpoint():
    buf = np.zeros((3, 4, 1))
    buf[1, 1, 0] = 0.0
    buf[1, 2, 0] = 1.0
    out = bilinear_sample(buf, np.array([[2.0, 1.0], [1.5, 1.0]])).data
    np.testing.assert_allclose(out[:, 0], [1.0, 0.5])


def test_bilinear_matches_four_neighbour_formula():
    rng = np.random.default_rng(4)
    buf = rng.uniform(size=(6, 7, 2))
    loc = rng.uniform([0, 0], [6, 5], size=(40, 2))
    out = bilinear_sample(buf, loc).data
    for (u, v), o in zip(loc, out):
        j0, i0 = int(np.floor(u)), int(np.floor(v))
        fu, fv = u - j0, v - i0
        j1, i1 = min(j0 + 1, 6), min(i0 + 1, 5)
        ref = ((1 - fu) * (1 - fv) * buf[i0, j0] + fu * (1 - fv) * buf[i0, j1]
               + (1 - fu) * fv * buf[i1, j0] + fu * fv * buf[i1, j1])
        np.testing.assert_allclose(o, ref, atol=1e-12)


def test_bilinear_exact_on_ramp_and_clamped():
    H, W = 8, 9
    ii, jj = np.mgrid[:H, :W]
    ramp = (0.3 * jj - 0.2 * ii + 1.0)[..., None].astype(np.float64)
    rng = np.random.default_rng(5)
    loc = rng.uniform([0, 0], [W - 1, H - 1], size=(100, 2))
    out = bilinear_sample(ramp, loc).data[:, 0]
    np.testing.assert_allclose(out, 0.3 * loc[:, 0] - 0.2 * loc[:, 1] + 1.0, atol=1e-12)
    far = bilinear_sample(ramp, np.array([[-5.0, -5.0], [100.0, 100.0]])).data[:, 0]
    np.testing.assert_allclose(far, [ramp[0, 0, 0], ramp[-1, -1, 0]])


def test_bilinear_gradients_fd():
    rng = np.random.default_rng(6)
    buf = rng.uniform(size=(5, 6, 3))
    loc = rng.uniform([0.2, 0.2], [4.8, 3.8], size=(10, 2))
    loc = loc + 0.37 * (np.abs(loc - np.round(loc)) < 0.05)
    w = rng.normal(size=(10, 3))
    assert finite_diff_check(lambda b: (bilinear_sample(b, loc) * w).sum(), buf).passed
    rep = finite_diff_check(lambda x: (bilinear_sample(buf, x) * w).sum(), loc)
    assert rep.passed, rep.message


def test_project_tensor_gradient():
    rng = np.random.default_rng(7)
    cam = Camera(random_rotation(rng), np.zeros(3), 80, 80, 32, 32, 64, 64)
    p = cam.center + 4.0 * cam.R[2] + rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))
    rep = finite_diff_check(lambda x: (project(cam, x)[0] * w).sum(), p)
    assert rep.passed, rep.message
    assert isinstance(project(cam, Tensor(p))[0], ad.Tensor)
