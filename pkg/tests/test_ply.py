import numpy as np

from npg.geometry import quat_to_matrix, random_rotation
from npg.gaussians import init_gaussians
from npg.ply import export_arrays, ply_fields, read_ply, rotate_sh, write_ply
from npg.sh import sh_eval
from npg.volumes import build_volumes, volume_frames


def test_rotate_sh_preserves_colour_in_world():
    rng = np.random.default_rng(0)
    G = 20
    T = np.stack([random_rotation(rng) for _ in range(G)])
    h = rng.normal(0, 0.3, size=(G, 16, 3))
    hw = rotate_sh(h, T)
    d = rng.normal(size=(G, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    local = np.einsum("gji,gj->gi", T, d)  # T^T d
    np.testing.assert_allclose(sh_eval(hw, d), sh_eval(h, local), atol=1e-10)


def test_rotate_sh_identity():
    h = np.random.default_rng(1).normal(size=(3, 16, 3))
    np.testing.assert_allclose(rotate_sh(h, np.broadcast_to(np.eye(3), (3, 3, 3))), h, atol=1e-12)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(40, 3))
    vol = build_volumes(pts, 8)
    soup = init_gaussians(vol, pts, rng=rng)
    soup.quats.data[:] = rng.normal(size=soup.quats.shape)
    frames = volume_frames(pts, vol)
    path = write_ply(tmp_path / "g.ply", soup, pts, vol, frames)
    back = read_ply(path)
    assert list(back) == ply_fields() and len(ply_fields()) == 62
    ref = export_arrays(soup, pts, vol, frames)
    np.testing.assert_allclose(np.column_stack([back["x"], back["y"], back["z"]]), ref["position"], rtol=1e-6)
    q = np.column_stack([back[f"rot_{i}"] for i in range(4)])
    world = frames[soup.volume_index] @ quat_to_matrix(soup.quats.data)
    np.testing.assert_allclose(quat_to_matrix(q), world, atol=1e-6)
    np.testing.assert_allclose(back["f_dc_1"], ref["sh"][:, 0, 1], rtol=1e-6)
    np.testing.assert_allclose(back["f_rest_15"], ref["sh"][:, 1, 1], rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(back["opacity"], soup.opacity_logit.data, rtol=1e-6)
